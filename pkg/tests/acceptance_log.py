"""Collects one PASS/FAIL line per acceptance criterion for the run summary."""

LINES: dict[str, str] = {}


def report(key: str, ok: bool, detail: str) -> bool:
    line = f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}"
    LINES[key] = line
    print(line, flush=True)
    return ok


def ordered() -> list[str]:
    def sort_key(k: str):
        num = "".join(c for c in k if c.isdigit())
        return (int(num) if num else 0, k)

    return [LINES[k] for k in sorted(LINES, key=sort_key)]
