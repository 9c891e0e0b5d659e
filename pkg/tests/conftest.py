from verdicts import RESULTS


def _order(key):
    num = "".join(ch for ch in key if ch.isdigit())
    return int(num or 0), key


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for key in sorted(RESULTS, key=_order):
        title, passed, detail = RESULTS[key]
        tr.write_line(f"criterion {key:<3} {'PASS' if passed else 'FAIL'}  {title}: {detail}")
    failed = [k for k, (_, ok, _) in RESULTS.items() if not ok]
    tr.write_line(f"{len(RESULTS) - len(failed)}/{len(RESULTS)} criteria pass"
                  + (f"; failing: {', '.join(sorted(failed, key=_order))}" if failed else ""))
