import json

import pytest
import torch

from deend.benchmark import BenchmarkPlan, format_param, num_threads, run_benchmark, write_report
from deend.config import MessageLengthError, TrainConfig
from deend.networks import make_variant

SWEEPS = [("identity", [None]), ("dropout", [0.2, 0.5]), ("jpeg_real", [50, 70, 90])]


@pytest.fixture(scope="module")
def bundle():
    torch.manual_seed(0)
    return make_variant(TrainConfig(H=16, W=16, L=16))


@pytest.fixture(scope="module")
def images():
    return torch.rand(5, 3, 16, 16, generator=torch.Generator().manual_seed(4))


def test_one_row_per_image_point_and_trial(bundle, images, tmp_path):
    plan = BenchmarkPlan(sweeps=SWEEPS, trials=3)
    report = run_benchmark(plan, bundle, images)
    assert len(report.rows) == 5 * 6 * 3
    assert [a["n"] for a in report.aggregates] == [15] * 6
    paths = write_report(report, tmp_path)
    lines = paths["csv"].read_text().splitlines()
    assert lines[0] == "image_id,kind,param,trial,bit_accuracy,psnr_embed"
    assert len(lines) == 91
    assert {p.name for p in paths["figures"]} == {"benchmark_identity.png", "benchmark_dropout.png",
                                                  "benchmark_jpeg_real.png"}
    summary = json.loads(paths["json"].read_text())
    assert summary["config"]["plan"]["trials"] == 3


def test_csv_is_deterministic_and_thread_invariant(bundle, images):
    plan = BenchmarkPlan(sweeps=SWEEPS, trials=2, seed=5)
    a = run_benchmark(plan, bundle, images, threads=1).csv_text()
    b = run_benchmark(plan, bundle, images, threads=1).csv_text()
    c = run_benchmark(plan, bundle, images, threads=4).csv_text()
    assert a == b == c
    d = run_benchmark(BenchmarkPlan(sweeps=SWEEPS, trials=2, seed=6), bundle, images).csv_text()
    assert d != a


def test_full_cropout_is_at_chance(bundle, images):
    # the host replaces the whole watermarked image, so nothing of the message survives
    report = run_benchmark(BenchmarkPlan(sweeps=[("cropout", [1.0])], trials=5), bundle, images)
    assert len(report.rows) >= 20
    assert report.lookup("cropout", 1.0)["mean_bit_accuracy"] == pytest.approx(0.5, abs=0.15)


def test_fixed_messages_are_used(bundle, images):
    msgs = torch.randint(0, 2, (5, 16), generator=torch.Generator().manual_seed(1)).float()
    plan = BenchmarkPlan(sweeps=[("identity", [None])], messages="training", trials=2)
    report = run_benchmark(plan, bundle, images, messages=msgs)
    with torch.no_grad():
        bits = (bundle.decoder(bundle.embed(images, msgs)) > 0.5).float()
    expected = (bits == msgs).double().mean(dim=1)
    got = [r["bit_accuracy"] for r in report.rows if r["trial"] == 0]
    assert got == pytest.approx(expected.tolist())


def test_message_length_mismatch(bundle, images):
    with pytest.raises(MessageLengthError):
        run_benchmark(BenchmarkPlan(sweeps=[("identity", [None])]), bundle, images, messages=torch.zeros(5, 8))


def test_plan_validation_and_round_trip():
    plan = BenchmarkPlan(sweeps=SWEEPS, trials=2, alpha=0.5)
    again = BenchmarkPlan.from_dict(json.loads(json.dumps(plan.to_dict())))
    assert again == plan
    with pytest.raises(ValueError):
        BenchmarkPlan(trials=0)
    with pytest.raises(ValueError):
        BenchmarkPlan(sweeps=[("dropout", [1.5])])
    with pytest.raises(ValueError):
        BenchmarkPlan(messages="other")


def test_format_param():
    assert format_param(None) == ""
    assert format_param(50) == "50"
    assert format_param(0.1) == "0.1"


def test_thread_env(monkeypatch):
    monkeypatch.setenv("WM_NUM_THREADS", "3")
    assert num_threads() == 3
    monkeypatch.setenv("WM_NUM_THREADS", "0")
    assert num_threads() == 1
    monkeypatch.setenv("WM_NUM_THREADS", "many")
    with pytest.raises(ValueError):
        num_threads()
