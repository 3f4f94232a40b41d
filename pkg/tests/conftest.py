import numpy as np
import pytest

from patchstitch import _accel
from patchstitch.patchmodel import Atlas, glorot_init
from patchstitch.spatial import GroundTruthCloud

BACKENDS = ["numba", "numpy"] if _accel.HAVE_NUMBA else ["numpy"]


@pytest.fixture(params=BACKENDS)
def backend(request):
    prev = _accel.get_backend()
    _accel.set_backend(request.param)
    yield request.param
    _accel.set_backend(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_gt(rng, n=30, scale=0.4):
    pts = rng.normal(scale=scale, size=(n, 3))
    nrm = rng.normal(size=(n, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    return GroundTruthCloud(pts, nrm, 1.0)


def toy_atlas(rng, K=2, H=8, D=0, scale=1.0):
    atlas = glorot_init(K, H, D, rng)
    atlas.params = atlas.params * scale + rng.normal(scale=0.05, size=atlas.n_params)
    return atlas


def flat_charts(*charts, hidden=8):
    return Atlas.from_linear_charts(charts, hidden=hidden)


# ---- shared sphere ablation (K=6, M=120, 2000 target points, 1500+1500 iterations)

SPHERE_VARIANTS = ("dsp", "aprox", "analyt", "analyt+stitch")
SPHERE_SEEDS = (0, 1, 2)


class SphereRuns:
    """Lazily fitted sphere ablations, one per seed, shared by the session."""

    def __init__(self):
        self._runs = {}
        self.seconds = {}

    def config(self, seed):
        from patchstitch.fit import FitConfig

        return FitConfig(K=6, M=120, hidden=128, total_iters=3000, pretrain_iters=1500, eval_every=500, seed=seed)

    def target(self, seed):
        from patchstitch.shapes import ShapeSpec, gen_shape, normalize

        return normalize(gen_shape(ShapeSpec("sphere", n=2000, seed=seed)))[0]

    def __getitem__(self, seed):
        """``{variant: FitResult}``; ``seconds[seed][variant]`` is that variant's
        full fit time (shared pretraining plus its own fine-tuning)."""
        if seed not in self._runs:
            import time

            from patchstitch.fit import finetune, pretrain

            gt, cfg = self.target(seed), self.config(seed)
            t = time.perf_counter()
            base = pretrain(gt, cfg)
            t_pre = time.perf_counter() - t
            runs, secs = {}, {}
            for v in SPHERE_VARIANTS:
                t = time.perf_counter()
                runs[v] = finetune(gt, cfg.with_variant(v), base)
                secs[v] = t_pre + time.perf_counter() - t
            self._runs[seed], self.seconds[seed] = runs, secs
        return self._runs[seed]


@pytest.fixture(scope="session")
def sphere_runs():
    return SphereRuns()


# ---- acceptance summary

ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, line = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {line}")
