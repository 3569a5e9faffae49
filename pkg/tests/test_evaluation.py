import numpy as np
import pytest

from metarobust import autodiff as ad
from metarobust import models, tasks, evaluation
from metarobust.metalearn import MetaConfig, meta_test
from metarobust.models import ArchSpec, init_model


def small_setup(seed=0, n_tasks=4):
    src = tasks.synth_dataset(classes=6, samples_per_class=12, dims=(8, 8, 1),
                              noise_level=16.0, seed=seed)
    eps = [tasks.sample_episode(src, way=3, shot=2, query_per_class=4,
                                seed=(seed, t)) for t in range(n_tasks)]
    spec = ArchSpec(input_dims=(8, 8, 1), hidden=(12,), n_classes=3, embed_dim=8)
    return init_model(spec, seed=seed), eps


# ---------------------------------------------------------------------------
# ra_sweep
# ---------------------------------------------------------------------------

def test_sweep_grid_must_be_sorted_and_nonnegative():
    model, eps = small_setup()
    with pytest.raises(ValueError):
        evaluation.ra_sweep(model, eps, [2.0, 1.0], cfg=MetaConfig(K=1))
    with pytest.raises(ValueError):
        evaluation.ra_sweep(model, eps, [-1.0, 0.0], cfg=MetaConfig(K=1))


def test_sweep_zero_row_equals_clean_accuracy():
    model, eps = small_setup()
    cfg = MetaConfig(K=1, alpha=0.01, seed=3)
    rep = evaluation.ra_sweep(model, eps, [0.0, 2.0], attack_steps=3,
                              cfg=cfg, base_seed=(7,))
    ref = meta_test(model, eps, cfg, base_seed=(7,))
    e0 = rep.per_epsilon[0]
    assert e0[0] == 0.0
    assert e0[1] == ref.sa
    assert e0[2] == ref.sa_ci
    assert e0[3] == len(eps)


def test_sweep_rows_follow_grid_and_echo_records_settings():
    model, eps = small_setup()
    cfg = MetaConfig(K=1, seed=11)
    grid = [0.0, 1.0, 4.0]
    rep = evaluation.ra_sweep(model, eps, grid, attack_steps=2, cfg=cfg)
    assert [r[0] for r in rep.per_epsilon] == grid
    assert rep.config_echo["epsilons"] == grid
    assert rep.config_echo["seed"] == 11
    assert rep.config_echo["eval_attack_steps"] == 2
    assert rep.wall_time > 0.0


def test_sweep_threaded_matches_serial_bitwise():
    model, eps = small_setup(seed=5, n_tasks=6)
    cfg = MetaConfig(K=1, seed=2)
    a = evaluation.ra_sweep(model, eps, [0.0, 2.0], attack_steps=3, cfg=cfg,
                            base_seed=(1,), threads=1)
    b = evaluation.ra_sweep(model, eps, [0.0, 2.0], attack_steps=3, cfg=cfg,
                            base_seed=(1,), threads=3)
    for ra_row, rb_row in zip(a.per_epsilon, b.per_epsilon):
        assert ra_row == rb_row


# ---------------------------------------------------------------------------
# invert_neuron
# ---------------------------------------------------------------------------

def linear_encoder(seed=0, d=9, embed=4):
    spec = ArchSpec(input_dims=(3, 3, 1), hidden=(), n_classes=2, embed_dim=embed)
    return init_model(spec, seed=seed)


def test_invert_validation():
    model = linear_encoder()
    x = np.full(9, 127.0)
    with pytest.raises(ValueError):
        evaluation.invert_neuron(model, x, neuron_index=99)
    with pytest.raises(ValueError):
        evaluation.invert_neuron(model, x, neuron_index=0, steps=-1)
    with pytest.raises(ValueError):
        evaluation.invert_neuron(model, np.zeros(5), neuron_index=0)


def test_invert_zero_steps_is_identity():
    model = linear_encoder()
    x = np.linspace(0, 255, 9)
    res = evaluation.invert_neuron(model, x, neuron_index=1, steps=0)
    assert np.array_equal(res.inverted_image, x)
    assert len(res.objective_trace) == 1


def test_invert_linear_encoder_reaches_box_optimum():
    # Linear embedding: activation_j = (x * input_scale) @ W[:, j] + b[j].
    # Over the pixel box the maximizer is 255 where the column is positive
    # and 0 where it is negative, reached in one large clipped step.
    model = linear_encoder(seed=3)
    j = 2
    params = model.params.copy()
    d, embed = 9, model.arch_spec.embed_dim
    W = params[:d * embed].reshape(d, embed)
    W[:, j] = np.array([0.4, -0.3, 0.2, -0.9, 0.5, -0.1, 0.7, -0.6, 0.8])
    model = model.with_params(params)
    expected = np.where(W[:, j] > 0, 255.0, 0.0)

    res = evaluation.invert_neuron(model, np.full(d, 120.0), neuron_index=j,
                                   steps=3, step_size=1e9)
    assert np.array_equal(res.inverted_image, expected)

    b = params[d * embed:d * embed + embed]
    scale = model.arch_spec.input_scale
    hand = float((expected * scale) @ W[:, j] + b[j])
    assert abs(res.objective_trace[-1] - hand) < 1e-12


def test_invert_trace_non_decreasing_by_default():
    spec = ArchSpec(input_dims=(4, 4, 1), hidden=(10,), n_classes=3, embed_dim=6)
    model = init_model(spec, seed=9)
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 255, size=16)
    res = evaluation.invert_neuron(model, x, neuron_index=4, steps=40,
                                   step_size=300.0)
    t = np.asarray(res.objective_trace)
    assert len(t) == 41
    assert np.all(np.diff(t) >= 0.0)
    assert t[-1] > t[0]


def test_invert_stays_in_pixel_box_many_runs():
    rng = np.random.default_rng(17)
    for run in range(100):
        spec = ArchSpec(input_dims=(3, 3, 1), hidden=(5,) if run % 2 else (),
                        n_classes=2, embed_dim=3)
        model = init_model(spec, seed=run)
        x = rng.uniform(-40, 300, size=9)  # deliberately out of range seeds
        x = np.clip(x, 0, 255)
        res = evaluation.invert_neuron(
            model, x, neuron_index=run % 3, steps=5,
            step_size=float(rng.uniform(1.0, 1e4)),
            accept_only_improving=bool(run % 3))
        assert res.inverted_image.min() >= 0.0
        assert res.inverted_image.max() <= 255.0


def test_invert_plain_variant_records_every_step():
    model = linear_encoder(seed=1)
    x = np.full(9, 64.0)
    res = evaluation.invert_neuron(model, x, neuron_index=0, steps=7,
                                   step_size=10.0, accept_only_improving=False)
    assert len(res.objective_trace) == 8


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------

def test_report_round_trip_exact(tmp_path):
    rows = [(0.0, 0.1 + 0.2, 1.0 / 3.0, 200),
            (2.0, 0.7123456789012345, 0.05000000001, 200),
            (8.0, 1e-17, 0.0, 200)]
    rep = evaluation.EvalReport(per_epsilon=rows,
                                config_echo={"seed": 4, "epsilons": [0.0, 2.0, 8.0]},
                                wall_time=1.25)
    path = tmp_path / "sweep.csv"
    evaluation.emit_report(rep, path)
    back = evaluation.load_report(path)
    assert back.per_epsilon == rows
    assert back.config_echo == rep.config_echo
    assert back.wall_time == 1.25
    text = path.read_text().splitlines()
    assert text[0] == "epsilon,accuracy,ci,n_tasks"
    assert len(text) == 4


def test_report_bad_header_rejected(tmp_path):
    p = tmp_path / "junk.csv"
    p.write_text("eps,acc\n0,1\n")
    with pytest.raises(ValueError, match="junk.csv"):
        evaluation.load_report(p)


def test_iam_dump_files(tmp_path):
    model = linear_encoder(seed=2)
    res = evaluation.invert_neuron(model, np.full(9, 100.0), neuron_index=1,
                                   steps=4, step_size=1e6)
    paths = evaluation.write_iam(res, tmp_path / "iam_n1", (3, 3, 1))
    src = tasks.load_file_dataset(paths["image"])
    assert src.data.shape == (1, 1, 3, 3, 1)
    assert np.array_equal(src.data.reshape(-1), np.round(res.inverted_image))
    grid = open(paths["text"]).read().splitlines()
    assert grid[0].startswith("# neuron 1")
    assert len(grid) == 4  # header + 3 pixel rows
    trace = open(paths["trace"]).read().splitlines()
    assert trace[0] == "step,activation"
    assert len(trace) == 1 + len(res.objective_trace)
