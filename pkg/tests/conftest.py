import functools

import pytest

from bohlspec.system import ExampleSpec, build_example


@functools.lru_cache(maxsize=None)
def _cached(name, params, sequence, segments, gaps):
    return build_example(ExampleSpec(name, dict(params), sequence, segments, gaps))


def example(name, sequence=None, segments=None, gaps=(), **params):
    """Catalog system, built once per parameter set."""
    return _cached(name, tuple(sorted(params.items())), sequence, segments, tuple(gaps))


@pytest.fixture
def ex():
    return example


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.call_failed = rep.failed
