"""
Pandera validation schemas.
These run before a CSV becomes an StDataset, so bad files fail early.
Feature columns depend on the file header, so the features schema is built
per call.
"""
from typing import Sequence

from pandera import Check, Column, DataFrameSchema


# =============================================
# FEATURES VALIDATION SCHEMA
# =============================================
def features_schema(feature_names: Sequence[str]) -> DataFrameSchema:
    columns = {
        "timestamp": Column(str, nullable=False,
            checks=Check.str_length(min_value=1),
            description="ISO-8601 or integer time step"),

        "node_id": Column(str, nullable=False,
            checks=Check.str_length(min_value=1),
            description="Node identifier, must match the adjacency file"),
    }
    for name in feature_names:
        # Dense grid, so no nulls; values must be finite for the tensor core
        columns[name] = Column(float, nullable=False,
            checks=[
                Check.greater_than(-1e300),
                Check.less_than(1e300),
            ],
            description=f"Node feature {name}")
    return DataFrameSchema(
        columns=columns,
        # Column order is the channel order, extra columns would be silently dropped
        strict=True,
        coerce=True,
    )


# =============================================
# ADJACENCY VALIDATION SCHEMA
# =============================================
adjacency_schema = DataFrameSchema(
    columns={
        "src": Column(str, nullable=False,
            checks=Check.str_length(min_value=1),
            description="Edge endpoint (undirected)"),

        "dst": Column(str, nullable=False,
            checks=Check.str_length(min_value=1),
            description="Edge endpoint (undirected)"),
    },
    strict=True,
    coerce=True,
)
