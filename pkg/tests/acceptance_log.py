"""Shared store for the per-criterion lines printed at the end of a run."""

RESULTS: dict[int, tuple[bool, str]] = {}


def record(n: int, ok: bool, detail: str) -> bool:
    RESULTS[n] = (bool(ok), detail)
    return bool(ok)
