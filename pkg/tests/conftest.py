import pytest

from u8kverify import corpus
from u8kverify.domains.typesys import load_annotations


@pytest.fixture(scope="session")
def kernel():
    return corpus.image("kernel_fig1")


@pytest.fixture(scope="session")
def user():
    return corpus.image("user_fig3")


@pytest.fixture(scope="session")
def env():
    return load_annotations(corpus.path("example.annot"))


@pytest.fixture(scope="session")
def incontext(kernel, user):
    from u8kverify.verify import run_in_context

    return run_in_context(kernel, user)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(k.split(".")[0].rstrip("abc")), k)):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
