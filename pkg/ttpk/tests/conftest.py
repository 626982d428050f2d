# Collection wiring for pytest: the suite is written in the unittest style
# used by test_all.py, where each module's register() builds a TestCase class
# from plain test_*(test, seed) functions. Collect those classes and skip the
# plain functions, which pytest would otherwise treat as fixture-based tests.

import inspect
import unittest

from _pytest.unittest import UnitTestCase


def pytest_pycollect_makeitem(collector, name, obj):

    if name == "register" and inspect.isfunction(obj):
        cls = obj(unittest.TestCase)
        setattr(collector.obj, cls.__name__, cls)
        return UnitTestCase.from_parent(collector, name=cls.__name__, obj=cls)

    if inspect.isfunction(obj) and name.startswith("test"):
        params = list(inspect.signature(obj).parameters)
        if params[:1] == ["test"]:
            return []

    return None
