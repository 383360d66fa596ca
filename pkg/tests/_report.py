"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""
import sys

LINES: list[str] = []


def record(criterion: str, ok: bool, detail: str) -> bool:
    line = f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}"
    LINES.append(line)
    print(line, file=sys.stderr)
    return ok
