import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

# filled by the acceptance suite, one record per criterion
ACCEPTANCE: list = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for rec in sorted(ACCEPTANCE, key=lambda r: r["n"]):
        terminalreporter.write_line(
            f"criterion {rec['n']:>2} {rec['status']:<4} {rec['title']} ({rec['elapsed']:.1f}s){': ' + rec['detail'] if rec['detail'] else ''}"
        )
