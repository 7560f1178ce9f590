"""Collects one verdict line per acceptance criterion."""

_RESULTS: dict[int, str] = {}


def record(number: int, title: str, ok: bool, detail: str) -> bool:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d} {title}: {detail}"
    _RESULTS[number] = line
    print(line)
    return ok


def lines() -> list[str]:
    return [_RESULTS[k] for k in sorted(_RESULTS)]
