"""Per-criterion pass/fail lines collected by the acceptance suite."""

RESULTS = {}


def record(key, title, passed, detail=""):
    RESULTS[key] = (title, bool(passed), detail)
    print(f"criterion {key}: {'PASS' if passed else 'FAIL'} {title} ({detail})")
    return passed
