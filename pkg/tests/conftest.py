import numpy as np
import pytest

from datacarve.core import Dataset, center_columns


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def make_study(rng, n=60, p=8, s=1, beta=None, sigma=1.0, study_id="study"):
    """Centered Gaussian study with a sparse covariate effect."""
    d = rng.standard_normal((n, s))
    x = rng.standard_normal((n, p)) + 0.3 * d[:, :1]
    beta = np.zeros(p) if beta is None else np.asarray(beta, dtype=float)
    y = d.sum(axis=1) + x @ beta + sigma * rng.standard_normal(n)
    return center_columns(Dataset(y, d, x, study_id=study_id))


def cli_pipeline(workdir, config, rep_id):
    """Drive summarize, carve and aggregate through the CLI for one replication.

    Returns the aggregated carved estimate read back from the output JSON.
    """
    import json

    from datacarve.cli import main
    from datacarve.core import write_csv_dataset
    from datacarve.sim import gen_setting

    studies, validation = gen_setting(config, rep_id)
    fit_paths = []
    for data in studies:
        stem = workdir / f"{data.study_id}-{rep_id}"
        write_csv_dataset(data, f"{stem}.csv")
        write_csv_dataset(validation.restrict(range(data.p)), f"{stem}-val.csv")
        N = data.n + validation.n
        summary = f"{stem}.carve-summary.json"
        assert main(["summarize", "--data", f"{stem}.csv", "--sigma", repr(config.sigma_eps),
                     "--lambda-mult", repr(config.lambda_multiplier), "--n-total", str(N),
                     "--out", summary]) == 0
        assert main(["carve", "--summary", summary, "--validation", f"{stem}-val.csv",
                     "--out", f"{stem}.fit.json"]) == 0
        fit_paths.append(f"{stem}.fit.json")
    agg = workdir / f"agg-{rep_id}.json"
    assert main(["aggregate", "--fits", *fit_paths, "--out", str(agg)]) == 0
    return json.loads(agg.read_text())["alpha_tilde"][0]


_ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_report():
    """Record one pass/fail line for an acceptance criterion and print it live."""

    def report(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
