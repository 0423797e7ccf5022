import numpy as np
import pytest

from breachcast import pipeline
from breachcast.bundle import decode_bundle, encode_bundle
from breachcast.config import PipelineConfig
from breachcast.embedding import PRE_POOLED, EmbeddingProvider, StateCache, SyntheticProvider
from breachcast.errors import EmptyTrainingSetError
from breachcast.evaluation import evaluate_trajectory
from breachcast.manifold import causal_delta
from breachcast.markov import TransitionModel
from breachcast.monitor import RiskMonitor, step_prompts
from breachcast.quantizer import Codebook, quantize_batch
from breachcast.synthetic import GeneratorConfig, generate
from breachcast.trajectory import Outcome, select, split_dataset

SMALL = PipelineConfig(n_clusters=8, calibration="kmeans2", fail_counts_scope="post-breach",
                       projection_hidden=256, causal_dim=128, head_hidden=128, score_hidden=32)


@pytest.fixture(scope="module")
def noiseless():
    corpus = generate(GeneratorConfig(n_trajectories=1000, noise_scale=0.0, n_true_clusters=8, seed=42))
    split = split_dataset(corpus.trajectories, 0.20, seed=42)
    cache = StateCache(corpus.provider())
    bundle = pipeline.train(select(corpus.trajectories, split.train), cache, SMALL)
    return corpus, split, cache, bundle


def test_noiseless_corpus_is_localized(noiseless):
    corpus, split, cache, bundle = noiseless
    report = pipeline.evaluate(bundle, select(corpus.trajectories, split.test), cache)
    assert report.n > 300
    assert report.step_accuracy >= 0.70
    assert report.mean_eta <= 0.80
    assert report.agent_accuracy >= report.step_accuracy


def test_bundle_reloads_to_the_same_alerts(noiseless):
    corpus, split, cache, bundle = noiseless
    reloaded = decode_bundle(encode_bundle(bundle))
    for traj in select(corpus.trajectories, split.test)[:25]:
        assert RiskMonitor(reloaded, cache=cache).risk_series(traj) == RiskMonitor(bundle, cache=cache).risk_series(traj)


def test_true_codebook_ranks_breach_pair_highest():
    corpus = generate(GeneratorConfig(n_trajectories=1000, noise_scale=0.0, n_true_clusters=8, seed=42))
    provider = corpus.provider()
    codebook = Codebook(centroids=corpus.directions)
    model = TransitionModel.empty(8)
    for traj in corpus.trajectories:
        deltas = causal_delta([provider.encode(prompt) for prompt in step_prompts(traj)])
        sequence = quantize_batch(deltas, codebook)
        assert list(sequence) == list(corpus.clusters[traj.id])
        model.accumulate(sequence, traj.outcome, traj.annotation.breach_step if traj.annotation else None)
    matrix = model.likelihood_matrix()
    i, j = corpus.config.breach_transition
    others = np.delete(matrix.ravel(), i * 8 + j)
    assert matrix[i, j] > others.max()


def test_default_scope_and_calibration_alert_early(noiseless):
    # all-transition failure counts put every start likelihood near 0.5, so the first-turn
    # velocity alone clears the jump threshold on most trajectories
    corpus, split, cache, bundle = noiseless
    test = select(corpus.trajectories, split.test)
    defaults = pipeline.train(select(corpus.trajectories, split.train), cache,
                              SMALL.replace(fail_counts_scope="all", calibration="percentile"))
    full_report = pipeline.evaluate(bundle, test, cache)
    default_report = pipeline.evaluate(defaults, test, cache)
    assert default_report.step_accuracy < 0.6
    assert default_report.early_rate > 0.4
    assert full_report.step_accuracy >= 0.70
    assert full_report.early_rate < default_report.early_rate


ABLATION_SEEDS = (1, 2, 3, 4, 5)
VERBOSITY = (0.25, 0.5, 2.0, 4.0)


@pytest.fixture(scope="module")
def ablations():
    """Paired full and ablated runs, one noisy corpus with verbose agents per seed."""
    results = []
    for seed in ABLATION_SEEDS:
        corpus = generate(GeneratorConfig(n_trajectories=400, noise_scale=0.01, agent_scales=VERBOSITY, seed=seed))
        split = split_dataset(corpus.trajectories, 0.5, seed=seed)
        train, test = select(corpus.trajectories, split.train), select(corpus.trajectories, split.test)
        cache = StateCache(corpus.provider())
        config = SMALL.replace(seed=seed)
        full = pipeline.train(train, cache, config)
        runs = {
            "full": full,
            "no_triplet": pipeline.train(train, cache, config.replace(no_triplet=True)),
            "absolute_states": pipeline.train(train, cache, config.replace(absolute_states=True)),
            "jump": pipeline.calibrate(full, train, cache),
            "static": pipeline.calibrate(full, train, cache, static=True),
        }
        results.append({name: pipeline.evaluate(bundle, test, cache) for name, bundle in runs.items()})
    return results


@pytest.mark.parametrize("ablation", ["no_triplet", "absolute_states"])
def test_ablation_lowers_step_accuracy(ablations, ablation):
    assert [run["full"].step_accuracy > run[ablation].step_accuracy for run in ablations] == [True] * 5


def test_static_threshold_warns_earlier(ablations):
    assert [run["static"].early_rate > run["jump"].early_rate for run in ablations] == [True] * 5
    for run in ablations:
        for static_row, jump_row in zip(run["static"].rows, run["jump"].rows):
            assert static_row.id == jump_row.id
            if jump_row.alert_step is not None:
                assert static_row.alert_step is not None and static_row.alert_step <= jump_row.alert_step


def small_corpus(n=120, **overrides):
    return generate(GeneratorConfig(n_trajectories=n, noise_scale=0.05, seed=3, **overrides))


TINY = SMALL.replace(projection_hidden=32, causal_dim=16, head_hidden=32, stage1_epochs=2, stage2_epochs=2)


def test_training_is_reproducible(monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
    corpus = small_corpus()
    first = pipeline.train(corpus.trajectories, corpus.provider(), TINY)
    second = pipeline.train(corpus.trajectories, corpus.provider(), TINY)
    assert encode_bundle(first) == encode_bundle(second)
    assert first.provenance["created"] == "2023-11-14T22:13:20Z"
    assert first.provenance["train_ids"] == sorted(traj.id for traj in corpus.trajectories)
    assert pipeline.evaluate(first, corpus.trajectories, corpus.provider()).to_json() == \
        pipeline.evaluate(second, corpus.trajectories, corpus.provider()).to_json()


def test_dataset_hash_ignores_order():
    corpus = small_corpus(10)
    assert pipeline.dataset_hash(corpus.trajectories) == pipeline.dataset_hash(corpus.trajectories[::-1])
    assert pipeline.dataset_hash(corpus.trajectories) != pipeline.dataset_hash(corpus.trajectories[1:])


class RecordingProvider(EmbeddingProvider):
    def __init__(self, inner):
        super().__init__(PRE_POOLED)
        self.inner = inner
        self.prompts = []

    def provider_name(self):
        return "recording"

    def _encode(self, prompts):
        self.prompts.extend(prompts)
        return [self.inner.encode(prompt) for prompt in prompts]


def test_forecast_never_reads_ahead():
    corpus = small_corpus()
    bundle = pipeline.train(corpus.trajectories, corpus.provider(), TINY)
    recorder = RecordingProvider(corpus.provider())
    monitor = RiskMonitor(bundle, recorder)
    for traj in corpus.trajectories[:20]:
        monitor.reset(traj.task)
        for t, turn in enumerate(traj.turns):
            seen = len(recorder.prompts)
            monitor.assess()
            unseen = [later.content for later in traj.turns[t:]]
            assert not any(content in prompt for prompt in recorder.prompts[seen:] for content in unseen)
            seen = len(recorder.prompts)
            monitor.observe(turn.agent, turn.content)
            unseen = [later.content for later in traj.turns[t + 1:]]
            assert not any(content in prompt for prompt in recorder.prompts[seen:] for content in unseen)


def test_evaluation_stops_reading_at_the_alert():
    corpus = small_corpus()
    bundle = pipeline.train(corpus.trajectories, corpus.provider(), TINY)
    for traj in corpus.trajectories[:20]:
        recorder = RecordingProvider(corpus.provider())
        row = evaluate_trajectory(traj, bundle, recorder)
        if row.alert_step is None:
            continue
        unseen = [turn.content for turn in traj.turns[row.alert_step:]]
        assert not any(content in prompt for prompt in recorder.prompts for content in unseen)


def test_train_needs_trajectories():
    with pytest.raises(EmptyTrainingSetError):
        pipeline.train([], SyntheticProvider(), TINY)


def test_sweep_k():
    corpus = small_corpus()
    split = split_dataset(corpus.trajectories, 0.5, seed=1)
    rows = pipeline.sweep_k(select(corpus.trajectories, split.train), select(corpus.trajectories, split.test),
                            corpus.provider(), TINY, ks=(4, 8))
    assert [row.k for row in rows] == [4, 8]
    for row in rows:
        assert 0.0 <= row.step_accuracy <= row.agent_accuracy <= 1.0
        assert 0.0 < row.mean_eta <= 1.0
    table = pipeline.format_sweep(rows)
    assert table.splitlines()[0].split() == ["K", "step", "agent", "eta"]
    assert len(table.splitlines()) == 3


def test_sweep_caps_top_m():
    corpus = small_corpus(60)
    rows = pipeline.sweep_k(corpus.trajectories, corpus.trajectories, corpus.provider(), TINY.replace(top_m=5), ks=(3,))
    assert rows[0].k == 3


def test_binary_baseline_pipeline():
    corpus = small_corpus()
    bundle = pipeline.train(corpus.trajectories, corpus.provider(), TINY.replace(binary_baseline=True))
    assert bundle.binary_head is not None
    assert decode_bundle(encode_bundle(bundle)).binary_head is not None
    report = pipeline.evaluate(bundle, corpus.trajectories, corpus.provider())
    assert 0.0 <= report.step_accuracy <= 1.0
    risks = RiskMonitor(bundle, corpus.provider()).risk_series(corpus.trajectories[0])
    assert all(0.0 <= risk <= 1.0 for risk in risks)


def test_without_triplet_stage():
    corpus = small_corpus()
    bundle = pipeline.train(corpus.trajectories, corpus.provider(), TINY.replace(no_triplet=True))
    assert bundle.projection is None
    assert bundle.codebook.dim == bundle.state_dim
    pipeline.evaluate(bundle, corpus.trajectories, corpus.provider())


def test_token_level_states():
    corpus = small_corpus(40, text_mode=True)
    provider = SyntheticProvider(dim=24, seed=1)
    config = TINY.replace(score_hidden=8, n_clusters=4, top_m=2, calibration="percentile")
    bundle = pipeline.train(corpus.trajectories, provider, config, provider_info={"name": "synthetic"})
    assert bundle.score_net is not None
    assert bundle.score_net.input_dim == 24
    assert bundle.provider == {"name": "synthetic"}
    report = pipeline.evaluate(bundle, corpus.trajectories, provider)
    failures = sum(traj.outcome is Outcome.FAILURE for traj in corpus.trajectories)
    assert report.n == failures
    assert report.n_success == len(corpus.trajectories) - failures


def test_evaluate_writes_traces(tmp_path, monkeypatch):
    corpus = small_corpus(60)
    bundle = pipeline.train(corpus.trajectories, corpus.provider(), TINY)
    monkeypatch.setenv("BREACHCAST_REPORT_FILE", str(tmp_path / "report.json"))
    report = pipeline.evaluate(bundle, corpus.trajectories, corpus.provider(), trace_dir=tmp_path / "traces",
                               prefix="syn-0000")
    assert len(report.rows) == 10
    assert len(list((tmp_path / "traces").glob("*.csv"))) == 10
    assert (tmp_path / "report.json").exists()


if __name__ == "__main__":
    test_true_codebook_ranks_breach_pair_highest()
    test_sweep_k()
