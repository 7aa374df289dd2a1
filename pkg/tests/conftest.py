import json

import pytest

SMALL_LAYOUT = {"grid": ["S..0.",
                         ".T.#.",
                         "..1TG"], "object_classes": 2}


@pytest.fixture
def small_layout(tmp_path):
    p = tmp_path / "small.json"
    p.write_text(json.dumps(SMALL_LAYOUT))
    return str(p)


# one summary line per acceptance criterion, printed after the test session
_LINES = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_LINES] = {}


@pytest.fixture
def criterion(request):
    lines = request.config.stash[_LINES]

    def record(number: int, ok: bool, text: str) -> bool:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {text}"
        lines[number] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash[_LINES]
    if lines:
        terminalreporter.section("acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])
