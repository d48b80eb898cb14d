import numpy as np
import pytest

from hnseg import autodiff as ad


def taped_grads(fn, arrays):
    """Run ``fn(*tensors)`` under a tape and return (loss value, list of gradients)."""
    tensors = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    with ad.Tape() as tape:
        loss = fn(*tensors)
    value = float(loss.data)
    ad.backward(tape, loss)
    return value, [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]


def numeric_grad(fn, arrays, which, index, h=1e-5):
    """Central difference of the untaped scalar ``fn`` in one entry of ``arrays[which]``.

    Returns (estimate, roundoff bound of the estimate).
    """
    plus = [a.copy() for a in arrays]
    minus = [a.copy() for a in arrays]
    plus[which][index] += h
    minus[which][index] -= h
    f = lambda xs: float(fn(*(ad.Tensor(x) for x in xs)).data)
    fp, fm = f(plus), f(minus)
    return (fp - fm) / (2 * h), ROUNDOFF * (abs(fp) + abs(fm) + 1.0) / (2 * h)


# a few dozen ulps of |f| covers float64 summation error in these small graphs
ROUNDOFF = 32 * np.finfo(np.float64).eps


def max_rel_error(fn, arrays, samples=None, seed=0, h=1e-5, raw=False):
    """Largest |analytic - numeric| / max(|analytic|, |numeric|) over checked entries.

    Entries whose disagreement is inside the difference quotient's own
    roundoff bound count as exact agreement: the oracle cannot resolve them.
    ``raw=True`` drops that allowance (for reporting); it still skips entries
    that are zero to within 1e-15 on both sides, such as attention key biases.
    """
    _, grads = taped_grads(fn, arrays)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for which, a in enumerate(arrays):
        flat = np.arange(a.size)
        if samples is not None and a.size > samples:
            flat = rng.choice(a.size, size=samples, replace=False)
        for f in flat:
            idx = np.unravel_index(f, a.shape)
            num, noise = numeric_grad(fn, arrays, which, idx, h)
            ana = float(grads[which][idx])
            if abs(ana - num) > (0.0 if raw else noise) and max(abs(ana), abs(num)) > (1e-15 if raw else 0.0):
                worst = max(worst, abs(ana - num) / max(abs(num), abs(ana)))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------------------
# small synthetic dataset shared by the pipeline and CLI tests

CENTER_COUNTS = {"A": 3, "B": 2, "C": 1, "D": 2, "E": 2}
TOY_OVERRIDES = [
    "batch_size=4", "model.img_size=16", "model.patch_size=8", "model.embed_dim=16", "model.num_layers=4",
    "model.num_heads=2", "model.mlp_dim=32", "model.base_features=2",
]


@pytest.fixture(scope="session")
def raw_dataset(tmp_path_factory):
    from hnseg import synthetic

    root = tmp_path_factory.mktemp("raw")
    text = synthetic.write_raw_dataset(root, CENTER_COUNTS, n=24, spacing=8.0)
    return root, text


@pytest.fixture(scope="session")
def toy_data(raw_dataset, tmp_path_factory):
    """(preprocessed manifest, in-memory samples) on a 16^3 grid."""
    from hnseg import nifti_io, pipeline
    from hnseg.volume import PatientCase

    root, text = raw_dataset
    out = tmp_path_factory.mktemp("pre")
    cases = []
    for case in pipeline.build_manifest(root, text).cases:
        paths = [out / f"{case.patient_id}_{s}.nii.gz" for s in ("ct", "pt", "gtvt")]
        for vol, path in zip(pipeline.preprocess_case(case, 16), paths):
            nifti_io.save(vol, path)
        cases.append(PatientCase(case.patient_id, case.center_id, *map(str, paths), case.bbox))
    manifest = pipeline.DatasetManifest(cases, str(out))
    samples = {c.patient_id: pipeline.load_sample(c) for c in cases}
    return manifest, samples


@pytest.fixture
def toy_cfg():
    from hnseg.config import TrainConfig, apply_overrides

    return apply_overrides(TrainConfig(), TOY_OVERRIDES + ["epochs=2"])


# ---------------------------------------------------------------------------
# acceptance summary

ACCEPTANCE_RESULTS = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_RESULTS):
            terminalreporter.write_line(ACCEPTANCE_RESULTS[n])
