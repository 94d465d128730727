"""Collects one verdict per acceptance criterion for the end-of-run summary."""

RESULTS = {}


def record(number: int, title: str, passed: bool, detail: str = "") -> bool:
    RESULTS[number] = (title, bool(passed), detail)
    print(line(number))
    return bool(passed)


def line(number: int) -> str:
    title, passed, detail = RESULTS[number]
    return f"criterion {number:2d} {'PASS' if passed else 'FAIL'}: {title}" + (f" [{detail}]" if detail else "")


def summary_lines():
    return [line(n) for n in sorted(RESULTS)]
