"""pytest plugin collecting evaluation reports.

With ``--breachcast-json=path`` every test gets its own ``$BREACHCAST_REPORT_FILE``; the
reports published by :func:`breachcast.pipeline.evaluate` during the session are merged
into one JSON document keyed by test node id.
"""

import json
import os
import shutil

from breachcast.evaluation import REPORT_ENV


class ResultsBreachcast(object):
    def __init__(self, json_output):
        self.json_output = json_output
        self.names = []
        self.results_dir = os.path.abspath(".breachcast-results")

    def get_report_file(self, nodeid):
        return os.path.join(self.results_dir, nodeid.replace(os.sep, "_").replace("/", "_").replace(":", "-") + ".json")

    def pytest_runtest_logreport(self, report):
        if report.when == "call" and report.outcome != "skipped":
            self.names.append(report.nodeid)

    def pytest_sessionstart(self, session):

        if os.path.exists(self.results_dir):
            shutil.rmtree(self.results_dir)

        os.makedirs(self.results_dir)

    def pytest_runtest_setup(self, item):

        os.environ[REPORT_ENV] = self.get_report_file(item.nodeid)

    def pytest_runtest_teardown(self, item, nextitem):
        os.environ.pop(REPORT_ENV, None)

    def pytest_sessionfinish(self, session):

        reports = {}
        for nodeid in self.names:
            fname = self.get_report_file(nodeid)

            if os.path.isfile(fname):
                with open(fname, encoding="utf-8") as handle:
                    reports[nodeid] = json.load(handle)

        with open(self.json_output, "w", encoding="utf-8") as handle:
            json.dump({"reports": reports}, handle, indent=2, sort_keys=True)


def pytest_unconfigure(config):
    breachcast = getattr(config, "_breachcast", None)
    if breachcast:
        config.pluginmanager.unregister(breachcast)


def pytest_configure(config):
    if config.option.breachcast_json:
        config._breachcast = ResultsBreachcast(config.option.breachcast_json)
        config.pluginmanager.register(config._breachcast)


def pytest_addoption(parser):
    group = parser.getgroup("terminal reporting")
    group.addoption(
        "--breachcast-json",
        action="store",
        dest="breachcast_json",
        default=None,
        metavar="path",
        help="merge the evaluation reports published by the tests into one JSON file at given path.",
    )
