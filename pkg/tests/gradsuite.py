"""Finite-difference checks for every primitive and the composed graphs.

Each case builds fresh random inputs from a seed and returns (loss_fn, params).
Inputs that land within a hair of a relu kink or a max-pool near-tie are
redrawn, because central differences are meaningless across a kink.
"""

import numpy as np

from labelbank import tensorcore as tc
from labelbank.dataio import MetaRecord
from labelbank.filtering import FilterMode, filter_and_upsample, holistic_filter
from labelbank.heads import HeadConfig, head_forward, init_head
from labelbank.rng import SplitMix64
from labelbank.segnet import (
    FeatureNetConfig, PixelClassifierConfig, fcn_plus_forward, init_feature_net, init_pixel_classifier,
)

STEP = 1e-5
TOL = 1e-4
N_SEEDS = 20
KINK_MARGIN = 1e-3


def project(out: tc.Tensor, rng: np.random.Generator) -> tc.Tensor:
    """Scalar <out, R> for a fixed random R, so every output entry matters."""
    r = rng.normal(size=out.data.size)
    flat = tc.reshape(out, (out.data.size,))
    return tc.reshape(tc.linear(flat, tc.Tensor(r[None, :]), tc.Tensor(np.zeros(1))), ())


def P(a):
    return tc.Tensor(np.array(a, dtype=np.float64), requires_grad=True)


def case_sigmoid(rng, seed=0):
    x = P(rng.normal(size=(3, 4)) * 3)
    return lambda: project(tc.sigmoid(x), np.random.default_rng(1)), [x]


def case_logit(rng, seed=0):
    x = P(rng.uniform(0.05, 0.95, size=(2, 5)))
    return lambda: project(tc.logit(x), np.random.default_rng(2)), [x]


def case_relu(rng, seed=0):
    x = P(rng.normal(size=(4, 5)))
    return lambda: project(tc.relu(x), np.random.default_rng(3)), [x]


def case_mul_broadcast(rng, seed=0):
    a, b = P(rng.normal(size=3)), P(rng.normal(size=(3, 2, 4)))
    return lambda: project(tc.mul_broadcast(a, b), np.random.default_rng(4)), [a, b]


def case_linear(rng, seed=0):
    x, w, b = P(rng.normal(size=5)), P(rng.normal(size=(3, 5))), P(rng.normal(size=3))
    return lambda: project(tc.linear(x, w, b), np.random.default_rng(5)), [x, w, b]


def case_conv2d(rng, seed=0):
    x = P(rng.normal(size=(2, 6, 5)))
    w, b = P(rng.normal(size=(3, 2, 3, 3))), P(rng.normal(size=3))
    return lambda: project(tc.conv2d(x, w, b, dilation=1), np.random.default_rng(6)), [x, w, b]


def case_conv2d_dilated(rng, seed=0):
    x = P(rng.normal(size=(2, 7, 6)))
    w, b = P(rng.normal(size=(2, 2, 3, 3))), P(rng.normal(size=2))
    return lambda: project(tc.conv2d(x, w, b, dilation=2), np.random.default_rng(7)), [x, w, b]


def case_max_pool(rng, seed=0):
    x = P(rng.normal(size=(2, 4, 6)))
    return lambda: project(tc.max_pool2x2(x), np.random.default_rng(8)), [x]


def case_spp_pool(rng, seed=0):
    x = P(rng.normal(size=(2, 5, 7)))
    return lambda: project(tc.spp_pool(x, (1, 2, 3)), np.random.default_rng(9)), [x]


def case_region_max(rng, seed=0):
    x = P(rng.normal(size=(3, 6, 6)))
    regions = [(0, 4, 0, 4), (2, 6, 0, 4), (0, 4, 2, 6), (2, 6, 2, 6)]
    return lambda: project(tc.region_max(x, regions), np.random.default_rng(10)), [x]


def case_window_max(rng, seed=0):
    x = P(rng.normal(size=(5, 4)))
    return lambda: project(tc.window_max(x), np.random.default_rng(11)), [x]


def case_softmax_ce(rng, seed=0):
    x = P(rng.normal(size=(4, 3, 5)) * 2)
    t = rng.integers(0, 4, size=(3, 5))
    t[0, 0] = tc.IGNORE
    return lambda: tc.softmax_ce(x, t), [x]


def case_sigmoid_ce(rng, seed=0):
    x = P(rng.normal(size=(3, 4)) * 2)
    t = rng.integers(0, 2, size=(3, 4))
    return lambda: tc.sigmoid_ce(x, t), [x]


def case_bilinear(rng, seed=0):
    x = P(rng.normal(size=(2, 3, 4)))
    return lambda: project(tc.bilinear_upsample(x, 7, 9), np.random.default_rng(12)), [x]


def case_embedding_mean(rng, seed=0):
    table = P(rng.normal(size=(6, 3)))
    return lambda: project(tc.embedding_mean(table, [1, 4, 1, 5]), np.random.default_rng(13)), [table]


def case_concat_tile(rng, seed=0):
    a, v = P(rng.normal(size=(2, 3, 3))), P(rng.normal(size=2))
    return lambda: project(tc.concat_channels(a, tc.tile_spatial(v, 3, 3)), np.random.default_rng(14)), [a, v]


def case_holistic_filter(rng, seed=0):
    c, S = P(rng.uniform(-5, 5, size=4)), P(rng.uniform(-5, 5, size=(4, 3, 3)))
    return lambda: project(holistic_filter(c, S), np.random.default_rng(15)), [c, S]


def case_filter_upsample(rng, seed=0):
    c, S = P(rng.uniform(-5, 5, size=3)), P(rng.uniform(-5, 5, size=(3, 3, 4)))
    return lambda: project(filter_and_upsample(c, S, 6, 7), np.random.default_rng(16)), [c, S]


def case_upsample_filter(rng, seed=0):
    c, S = P(rng.uniform(-5, 5, size=3)), P(rng.uniform(-5, 5, size=(3, 3, 4)))
    mode = FilterMode("upsample_then_filter")
    return lambda: project(filter_and_upsample(c, S, 6, 7, mode), np.random.default_rng(17)), [c, S]


def _labels(rng, k, H, W):
    lbl = rng.integers(0, k, size=(H, W)).astype(np.uint8)
    return lbl


def _head_case(kind, rng, seed):
    k = 4
    cfg = HeadConfig(kind=kind, hidden_units=6, spp_levels=(1, 2), dc_window=2, dc_stride=1,
                     dc_channels=4, embed_dim=3, meta="w2v")
    weights = init_head(cfg, k, SplitMix64(seed), feat_channels=3, n_attributes=5, vocab_size=7)
    fmap = P(rng.normal(size=(3, 4, 4)))
    labels = _labels(rng, k, 8, 8)
    meta = MetaRecord(frozenset({0, 3}), (1, 5, 5, 2))

    def fn():
        out = head_forward(cfg, weights, feature_map=fmap, meta=meta, labels=labels,
                           total_stride=2, n_attributes=5)
        return tc.add(out.loss, project(out.bank, np.random.default_rng(18)))

    params = list(weights.values()) + ([fmap] if cfg.visual else [])
    return fn, params


def case_head_spp(rng, seed=0):
    return _head_case("spp", rng, seed)


def case_head_dc(rng, seed=0):
    return _head_case("dc", rng, seed)


def case_head_ohe(rng, seed=0):
    return _head_case("ohe", rng, seed)


def case_head_w2v(rng, seed=0):
    return _head_case("w2v", rng, seed)


def case_head_combined(rng, seed=0):
    return _head_case("combined", rng, seed)


def case_segnet(rng, seed=0):
    k = 3
    fcfg = FeatureNetConfig(stages=((3, 1), (4, 1)))
    pcfg = PixelClassifierConfig(k=k, channels=4)
    srng = SplitMix64(seed)
    weights = init_feature_net(fcfg, srng)
    weights.update(init_pixel_classifier(pcfg, fcfg.out_channels, srng))
    for w in weights.values():
        if w.data.ndim == 1:
            w.data[:] = rng.normal(size=w.data.shape) * 0.1
    img = tc.Tensor(rng.uniform(0, 1, size=(3, 16, 16)))
    labels = _labels(rng, k, 16, 16)

    def fn():
        S = fcn_plus_forward(img, fcfg, pcfg, weights)
        c = tc.Tensor(np.array([1.0, -0.5, 2.0]))
        return tc.softmax_ce(filter_and_upsample(c, S, 16, 16), labels)

    return fn, list(weights.values())


PRIMITIVE_CASES = {
    "sigmoid": case_sigmoid, "logit": case_logit, "relu": case_relu,
    "mul_broadcast": case_mul_broadcast, "linear": case_linear, "conv2d": case_conv2d,
    "conv2d_dilated": case_conv2d_dilated, "max_pool2x2": case_max_pool, "spp_pool": case_spp_pool,
    "region_max": case_region_max, "window_max": case_window_max, "softmax_ce": case_softmax_ce,
    "sigmoid_ce": case_sigmoid_ce, "bilinear_upsample": case_bilinear,
    "embedding_mean": case_embedding_mean, "concat_tile": case_concat_tile,
}

COMPOSITE_CASES = {
    "holistic_filter": case_holistic_filter, "filter_then_upsample": case_filter_upsample,
    "upsample_then_filter": case_upsample_filter, "head_spp": case_head_spp, "head_dc": case_head_dc,
    "head_ohe": case_head_ohe, "head_w2v": case_head_w2v, "head_combined": case_head_combined,
    "segnet": case_segnet,
}

ALL_CASES = {**PRIMITIVE_CASES, **COMPOSITE_CASES}

# composite graphs have thousands of weights; check a random subset per tensor per seed
MAX_ENTRIES = {"segnet": 6, "head_spp": 12, "head_dc": 12, "head_combined": 12}


def build_case(name: str, seed: int):
    """Draw inputs for ``seed``, redrawing while the graph sits too close to a kink."""
    maker = ALL_CASES[name]
    for attempt in range(50):
        rng = np.random.default_rng([seed, attempt])
        fn, params = maker(rng, seed * 100 + attempt)
        if tc.Graph.from_output(fn()).kink_margin() > KINK_MARGIN:
            return fn, params
    raise RuntimeError(f"could not draw kink-free inputs for {name}")


def run_case(name: str, seed: int) -> float:
    fn, params = build_case(name, seed)
    return tc.gradcheck(fn, params, step=STEP, max_entries=MAX_ENTRIES.get(name),
                        rng=np.random.default_rng(seed))
