import json
import os
from types import SimpleNamespace

import pytest

from breachcast import plugin
from breachcast.evaluation import REPORT_ENV


@pytest.fixture
def results(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv(REPORT_ENV, raising=False)
    return plugin.ResultsBreachcast(str(tmp_path / "merged.json"))


def test_report_file_names(results, tmp_path):
    path = results.get_report_file("tests/test_pipeline.py::test_sweep_k[4]")
    assert os.path.realpath(os.path.dirname(path)) == os.path.realpath(str(tmp_path / ".breachcast-results"))
    assert os.path.basename(path) == "tests_test_pipeline.py--test_sweep_k[4].json"


def test_session_merges_published_reports(results, tmp_path):
    results.pytest_sessionstart(session=None)
    assert (tmp_path / ".breachcast-results").is_dir()

    for nodeid, outcome in (("t.py::a", "passed"), ("t.py::b", "failed"), ("t.py::c", "skipped")):
        item = SimpleNamespace(nodeid=nodeid)
        results.pytest_runtest_setup(item)
        target = os.environ[REPORT_ENV]
        assert target == results.get_report_file(nodeid)
        if nodeid != "t.py::b":
            with open(target, "w") as handle:
                json.dump({"n": len(nodeid)}, handle)
        results.pytest_runtest_logreport(SimpleNamespace(when="call", outcome=outcome, nodeid=nodeid))
        results.pytest_runtest_teardown(item, None)
        assert REPORT_ENV not in os.environ

    results.pytest_runtest_logreport(SimpleNamespace(when="setup", outcome="passed", nodeid="t.py::d"))
    assert results.names == ["t.py::a", "t.py::b"]

    results.pytest_sessionfinish(session=None)
    merged = json.loads((tmp_path / "merged.json").read_text())
    assert merged == {"reports": {"t.py::a": {"n": 7}}}


def test_session_start_clears_old_results(results, tmp_path):
    stale = tmp_path / ".breachcast-results" / "old.json"
    stale.parent.mkdir()
    stale.write_text("{}")
    results.pytest_sessionstart(session=None)
    assert not stale.exists()


class FakePluginManager(object):
    def __init__(self):
        self.registered = []

    def register(self, obj):
        self.registered.append(obj)

    def unregister(self, obj):
        self.registered.remove(obj)


def test_configure_registers_only_with_option(tmp_path):
    manager = FakePluginManager()
    config = SimpleNamespace(option=SimpleNamespace(breachcast_json=None), pluginmanager=manager)
    plugin.pytest_configure(config)
    assert manager.registered == []
    plugin.pytest_unconfigure(config)

    config.option.breachcast_json = str(tmp_path / "out.json")
    plugin.pytest_configure(config)
    assert manager.registered == [config._breachcast]
    assert config._breachcast.json_output == str(tmp_path / "out.json")
    plugin.pytest_unconfigure(config)
    assert manager.registered == []


def test_option_is_declared():
    declared = []
    group = SimpleNamespace(addoption=lambda *args, **kwargs: declared.append((args, kwargs)))
    parser = SimpleNamespace(getgroup=lambda name: group)
    plugin.pytest_addoption(parser)
    (args, kwargs), = declared
    assert args == ("--breachcast-json",)
    assert kwargs["dest"] == "breachcast_json"
