"""
Pass/fail bookkeeping for benchmark acceptance checks.
"""
import logging

from diffirm.errors import AcceptanceError

logger = logging.getLogger("diffirm.bench")


class QualityChecks:
    """Collects ✓/✗ lines; `finish` logs them and raises if any failed."""

    def __init__(self, name: str):
        self.name = name
        self.lines: list[str] = []
        self.failed: list[str] = []

    def check(self, name: str, ok: bool, detail: str) -> bool:
        ok = bool(ok)
        self.lines.append(f"{'✓' if ok else '✗'} {name}: {detail}")
        if not ok:
            self.failed.append(name)
        return ok

    def finish(self) -> dict:
        passed = len(self.lines) - len(self.failed)
        for line in self.lines:
            logger.info(line)
        logger.info("%s: %d passed, %d failed", self.name, passed, len(self.failed))
        summary = {"passed": passed, "failed": list(self.failed), "lines": list(self.lines)}
        if self.failed:
            raise AcceptanceError(
                f"{len(self.failed)} {self.name} checks failed: {', '.join(self.failed)}", self.failed, summary,
            )
        return summary
