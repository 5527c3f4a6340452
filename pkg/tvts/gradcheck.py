"""
Finite-difference gradient suite

Every differentiable op is checked through sum(op(x) * R) for a fixed random R,
then the losses, then the fully composed training loss of a tiny model.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from tvts import numerics as nx
from tvts.corpus import build_mask
from tvts.numerics import Tape, Tensor
from tvts.objectives import combine, factorial_sort_loss, info_nce, pair_sort_loss, sort_loss
from tvts.schemas import EncoderConfig, TrainConfig
from tvts.sortformer import slot_pairs
from tvts.trainer import Batch, forward_batch, init_model

logger = logging.getLogger(__name__)

TOLERANCE = 1e-4
STEP = 1e-5
COORDS_PER_TENSOR = 6

Inputs = Dict[str, np.ndarray]
LossFn = Callable[[Dict[str, Tensor]], Tensor]


@dataclass
class GradCase:
    name: str
    inputs: Inputs
    fn: LossFn
    coords: Optional[int] = None  # probe a random subset of this many coordinates per input


@dataclass
class OpResult:
    name: str
    max_rel_error: float
    checks: int

    def passed(self, tolerance: float = TOLERANCE) -> bool:
        return bool(np.isfinite(self.max_rel_error)) and self.max_rel_error < tolerance


@dataclass
class GradCheckReport:
    results: List[OpResult] = field(default_factory=list)
    tolerance: float = TOLERANCE

    @property
    def failures(self) -> List[str]:
        return [r.name for r in self.results if not r.passed(self.tolerance)]

    @property
    def passed(self) -> bool:
        return not self.failures

    def table(self) -> pd.DataFrame:
        return pd.DataFrame(
            [{"op": r.name, "max_rel_error": r.max_rel_error, "checks": r.checks,
              "status": "ok" if r.passed(self.tolerance) else "FAIL"} for r in self.results]
        )


# -----------------------------------------------------------------------------
# Checking
# -----------------------------------------------------------------------------

def _sample_coords(shape: Tuple[int, ...], count: Optional[int], rng: np.random.Generator) -> List[Tuple[int, ...]]:
    size = int(np.prod(shape))
    if count is None or count >= size:
        return list(np.ndindex(shape))
    flat = rng.choice(size, size=count, replace=False)
    return [tuple(int(i) for i in np.unravel_index(f, shape)) for f in sorted(flat)]


def check_case(case: GradCase, rng: np.random.Generator, h: float = STEP) -> float:
    """Max relative error between the tape gradient and central differences"""
    with Tape() as tape:
        tracked = tape.watch_all(case.inputs)
        loss = case.fn(tracked)
    analytic = nx.backward(tape, loss).by_name(tracked)

    worst = 0.0
    for name, value in case.inputs.items():
        coords = _sample_coords(value.shape, case.coords, rng)
        constants = nx.as_tensors(case.inputs)

        def probe(x: Tensor, name=name, constants=constants) -> Tensor:
            return case.fn({**constants, name: x})

        numeric = nx.finite_diff_grad(probe, value, h=h, indices=coords).data
        picked = np.array([analytic[name][c] for c in coords])
        worst = max(worst, nx.relative_error(picked, numeric))
    return worst


def _weighted(out: Tensor, r: np.ndarray) -> Tensor:
    return nx.sum(nx.mul(out, r))


def op_cases(rng: np.random.Generator) -> List[GradCase]:
    """One case per differentiable op, fresh random inputs"""
    def normal(*shape):
        return rng.standard_normal(shape)

    def case(name: str, inputs: Inputs, op: Callable[..., Tensor], out_shape: Tuple[int, ...]) -> GradCase:
        r = normal(*out_shape)
        return GradCase(name, inputs, lambda t: _weighted(op(**t), r))

    key_mask = np.zeros((2, 5), dtype=bool)
    key_mask[0, 4] = key_mask[1, 1] = True
    orders = np.array([rng.permutation(3) for _ in range(2)])
    return [
        case("add", {"a": normal(3, 4), "b": normal(4)}, nx.add, (3, 4)),
        case("sub", {"a": normal(3, 4), "b": normal(3, 4)}, nx.sub, (3, 4)),
        case("mul", {"a": normal(3, 4), "b": normal(4)}, nx.mul, (3, 4)),
        case("scale", {"a": normal(2, 3)}, lambda a: nx.scale(a, 0.7), (2, 3)),
        case("neg", {"a": normal(2, 3)}, nx.neg, (2, 3)),
        case("matmul", {"a": normal(2, 3, 4), "b": normal(4, 5)}, nx.matmul, (2, 3, 5)),
        case("transpose", {"a": normal(2, 3, 4)}, lambda a: nx.transpose(a, (1, 0, 2)), (3, 2, 4)),
        case("reshape", {"a": normal(2, 6)}, lambda a: nx.reshape(a, (3, 4)), (3, 4)),
        case("getitem", {"a": normal(3, 4)}, lambda a: nx.getitem(a, (slice(None), slice(1, 3))), (3, 2)),
        case("gather", {"a": normal(4, 3)}, lambda a: nx.getitem(a, np.array([0, 2, 0, 3])), (4, 3)),
        case("concat", {"a": normal(2, 3), "b": normal(2, 2)}, lambda a, b: nx.concat([a, b], axis=1), (2, 5)),
        case("expand", {"a": normal(3)}, lambda a: nx.expand(a, (2, 4, 3)), (2, 4, 3)),
        case("sum", {"a": normal(3, 4)}, lambda a: nx.sum(a, axis=1), (3,)),
        case("mean", {"a": normal(3, 4)}, lambda a: nx.mean(a, axis=0), (4,)),
        case("gelu", {"a": normal(3, 4)}, nx.gelu, (3, 4)),
        case("softmax", {"a": normal(3, 4)}, nx.softmax, (3, 4)),
        case("log_softmax", {"a": normal(3, 4)}, nx.log_softmax, (3, 4)),
        case("layer_norm", {"x": normal(2, 3, 4), "gain": normal(4), "bias": normal(4)}, nx.layer_norm, (2, 3, 4)),
        case("l2_normalize", {"a": normal(3, 4)}, nx.l2_normalize, (3, 4)),
        case("attention", {"q": normal(2, 3, 4), "k": normal(2, 5, 4), "v": normal(2, 5, 4)},
             lambda q, k, v: nx.multi_head_attention(q, k, v, heads=2, attn_mask=key_mask), (2, 3, 4)),
        GradCase("info_nce", {"q": normal(3, 4), "k": normal(3, 4)},
                 lambda t: info_nce(nx.l2_normalize(t["q"]), nx.l2_normalize(t["k"]), 0.1)),
        GradCase("sort_loss", {"logits": normal(2, 3, 3)}, lambda t: sort_loss(t["logits"], orders)),
        GradCase("pair_sort_loss", {"logits": normal(2, 3, 2)},
                 lambda t: pair_sort_loss(t["logits"], slot_pairs(3), orders)),
        GradCase("factorial_sort_loss", {"logits": normal(2, 6)}, lambda t: factorial_sort_loss(t["logits"], orders)),
    ]


# -----------------------------------------------------------------------------
# Composed model
# -----------------------------------------------------------------------------

def tiny_config(proxy: str = "kway", seed: int = 0) -> TrainConfig:
    encoder = EncoderConfig(hidden_dim=8, depth=1, text_depth=1, heads=2, patch=8, tubelet=2, frames=4,
                            height=16, width=16, max_text_len=5, vocab_size=12, common_dim=4)
    return TrainConfig(num_transcripts=3, batch_size=3, lambda_sort=2.0, mask_ratio=0.5, temperature=0.1,
                       proxy=proxy, seed=seed, encoder=encoder, progress=False)


def tiny_batch(config: TrainConfig, rng: np.random.Generator) -> Batch:
    enc = config.encoder
    b, k, length = config.batch_size, config.num_transcripts, enc.max_text_len
    token_ids = np.zeros((b, k, length), dtype=np.int64)
    for i in range(b):
        for j in range(k):
            used = int(rng.integers(2, length + 1))
            token_ids[i, j, 0] = 1
            token_ids[i, j, 1:used] = rng.integers(3, enc.vocab_size, size=used - 1)
    return Batch(
        step=0,
        video_ids=[f"gc{i}" for i in range(b)],
        frames=rng.random((b, enc.frames, enc.height, enc.width, 3)),
        windows=[],
        token_ids=token_ids,
        orders=np.array([rng.permutation(k) for _ in range(b)]),
        masks=[build_mask(enc.tokens_per_slice, enc.num_slices, config.mask_ratio, rng) for _ in range(b)],
        slice_perms=np.array([rng.permutation(enc.num_slices) for _ in range(b)]),
    )


def model_case(proxy: str, seed: int) -> GradCase:
    """L_total = L_align + lambda * L_sort of a tiny randomly initialised model"""
    config = tiny_config(proxy, seed)
    rng = np.random.default_rng([seed, 11])
    params = {name: p + 0.05 * rng.standard_normal(p.shape) for name, p in init_model(config).items()}
    batch = tiny_batch(config, rng)

    def loss(tracked: Dict[str, Tensor]) -> Tensor:
        out = forward_batch(tracked, batch, config)
        return combine(out.align, out.sort, config.lambda_sort)

    return GradCase(f"total_loss[{proxy}]", params, loss, coords=COORDS_PER_TENSOR)


# -----------------------------------------------------------------------------
# Suite
# -----------------------------------------------------------------------------

def run_grad_check(seeds: int = 10, model_seeds: Optional[int] = None,
                   extra_proxies: Sequence[str] = ("pair", "factorial", "videosort"),
                   tolerance: float = TOLERANCE, progress: bool = False) -> GradCheckReport:
    """
    Per-op checks and the kway composed loss over `seeds` seeds; the other sort
    heads get one seed each. Always runs in float64.
    """
    previous = np.dtype(nx.get_default_dtype()).name
    nx.set_default_dtype("float64")
    worst: Dict[str, List[float]] = {}
    try:
        jobs: List[Tuple[str, int]] = [("ops", s) for s in range(seeds)]
        jobs += [("kway", s) for s in range(seeds if model_seeds is None else model_seeds)]
        jobs += [(proxy, 0) for proxy in extra_proxies]
        for kind, seed in tqdm(jobs, desc="grad-check", disable=not progress):
            rng = np.random.default_rng([seed, 10])
            cases = op_cases(rng) if kind == "ops" else [model_case(kind, seed)]
            for case in cases:
                worst.setdefault(case.name, []).append(check_case(case, rng))
    finally:
        nx.set_default_dtype(previous)

    report = GradCheckReport(
        results=[OpResult(name, float(np.max(errors)), len(errors)) for name, errors in worst.items()],
        tolerance=tolerance,
    )
    if report.passed:
        logger.info(f"✅ Gradient check passed for {len(report.results)} ops")
    else:
        logger.error(f"❌ Gradient check failed for: {', '.join(report.failures)}")
    return report
