"""Shared registry of one-line acceptance verdicts, printed in the pytest summary."""

RESULTS: dict[int, str] = {}


def record(criterion: int, title: str, passed: bool, detail: str) -> None:
    line = f"criterion {criterion} ({title}): {'PASS' if passed else 'FAIL'} - {detail}"
    RESULTS[criterion] = line
    print(line)
