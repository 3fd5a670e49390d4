# polarseg/services/verification_service.py
"""Self-contained property checks run by the `verify` command."""
import time
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from api.models import BranchSpec, CheckResult, ClassSchema, EafnetConfig, StokesMap, SyntheticSceneConfig
from config import logger
from core import functional as F
from core.errors import InputValidationError
from core.gradcheck import grad_check
from core.tensor import Tensor
from nn.eafnet import EacModule, EAFNet, adaptive_kernel_size, fuse_stage
from services.checkpoint_service import decode_checkpoint, encode_checkpoint
from services.evaluation_service import ConfusionMatrix, compute_metrics, evaluate, update_confusion
from services.polarimetry import (
    brewster_angle_deg,
    compute_aolp,
    compute_dolp,
    compute_stokes,
    flip_aolp_values,
    fresnel_coefficients,
    synthesize_intensities,
)
from services.synthetic_service import synthesize_dataset
from utils.pder import decode_derived, encode_derived

CheckFn = Callable[[], Tuple[bool, str]]
OP_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3
# each op is gradient-checked at these shape extents, seeded 5 + extent
GRADIENT_EXTENTS = (0, 1, 2)
KERNEL_TABLE = {16: 2, 32: 4, 64: 4, 128: 4, 256: 4, 512: 6}


def _random_stokes(rng: np.random.Generator, count: int) -> StokesMap:
    s0 = rng.uniform(0.05, 2.0, (count, 1))
    dolp = rng.uniform(0.0, 1.0, (count, 1))
    angle = rng.uniform(0.0, 2 * np.pi, (count, 1))
    return StokesMap(s0=s0, s1=s0 * dolp * np.cos(angle), s2=s0 * dolp * np.sin(angle))


def check_stokes_roundtrip() -> Tuple[bool, str]:
    stokes = _random_stokes(np.random.default_rng(1), 10_000)
    again = compute_stokes(synthesize_intensities(stokes))
    residual = max(float(np.max(np.abs(a - b))) for a, b in
                   ((stokes.s0, again.s0), (stokes.s1, again.s1), (stokes.s2, again.s2)))
    return residual < 1e-9, f"max residual {residual:.2e}"


def check_dolp_aolp() -> Tuple[bool, str]:
    stokes = _random_stokes(np.random.default_rng(2), 10_000)
    dolp, aolp = compute_dolp(stokes), compute_aolp(stokes)
    in_range = bool(dolp.min() >= 0 and dolp.max() <= 1 and aolp.min() >= 0 and aolp.max() < 180)
    case_a = StokesMap(s0=[[1.0]], s1=[[1.0]], s2=[[0.0]])
    case_b = StokesMap(s0=[[1.0]], s1=[[0.0]], s2=[[-1.0]])
    hand = (abs(float(compute_dolp(case_a)[0, 0, 0]) - 1.0) < 1e-9
            and abs(float(compute_aolp(case_a)[0, 0, 0]) - 45.0) < 1e-9
            and abs(float(compute_aolp(case_b)[0, 0, 0]) - 90.0) < 1e-9)
    return in_range and hand, f"ranges ok={in_range}, hand cases ok={hand}"


def check_fresnel() -> Tuple[bool, str]:
    worst = max(abs(fresnel_coefficients(1.0, n, brewster_angle_deg(1.0, n)).r_p) for n in (1.33, 1.5, 2.4))
    normal = fresnel_coefficients(1.0, 1.5, 0.0)
    expected = (-0.2, 0.2, 0.8, 0.8)
    got = (normal.r_s, normal.r_p, normal.t_s, normal.t_p)
    normal_ok = all(abs(a - b) < 1e-12 for a, b in zip(got, expected))
    return worst < 1e-9 and normal_ok, f"max |r_p(Brewster)| {worst:.2e}, normal incidence {got}"


def check_kernel_table() -> Tuple[bool, str]:
    got = {c: adaptive_kernel_size(c) for c in KERNEL_TABLE}
    return got == KERNEL_TABLE, f"{got}"


def check_flip_involution() -> Tuple[bool, str]:
    angles = np.random.default_rng(3).uniform(0.0, 180.0, 1_000_000)
    worst = float(np.max(np.abs(flip_aolp_values(flip_aolp_values(angles)) - angles)))
    return worst < 1e-12, f"max deviation {worst:.2e}"


def check_pder_roundtrip() -> Tuple[bool, str]:
    rng = np.random.default_rng(4)
    ok = all(np.array_equal(decode_derived(encode_derived(a)), a) and decode_derived(encode_derived(a)).dtype == a.dtype
             for a in (rng.random((3, 4)), rng.random((2, 5, 7)).astype(np.float32)))
    return ok, "bitwise" if ok else "mismatch"


def _op_cases(rng: np.random.Generator, extent: int = 0) -> Dict[str, Tuple[Callable[..., Tensor], List[np.ndarray]]]:
    """Gradient-check cases per primitive op; extent grows the free dimensions of every case."""
    def away_from_zero(shape):
        values = rng.standard_normal(shape)
        return values + np.sign(values) * 0.1

    e = extent
    side = 4 + 2 * e
    labels = rng.integers(0, 3, (2, 4 + e, 4))
    return {
        "add": (F.add, [rng.standard_normal((2, 3, 4 + e)), rng.standard_normal((3, 1))]),
        "mul": (F.mul, [rng.standard_normal((2, 3, 4 + e)), rng.standard_normal((1, 4 + e))]),
        "relu": (F.relu, [away_from_zero((3, 5 + e))]),
        "sigmoid": (F.sigmoid, [rng.standard_normal((3, 5 + e))]),
        "mean": (F.mean, [rng.standard_normal((4 + e, 3))]),
        "concat": (lambda a, b: F.concat([a, b]),
                   [rng.standard_normal((2, 2, 3 + e, 3)), rng.standard_normal((2, 1, 3 + e, 3))]),
        "conv2d": (lambda x, w, b: F.conv2d(x, w, b, stride=2),
                   [rng.standard_normal((2, 3, 7 + e, 7 + e)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)]),
        "conv1d_channels": (F.conv1d_channels, [rng.standard_normal((2, 9 + e)), rng.standard_normal(4 - e % 2)]),
        "channel_scale": (F.channel_scale, [rng.standard_normal((2, 3, 4 + e, 4)), rng.uniform(0.1, 0.9, (2, 3))]),
        "global_avg_pool": (F.global_avg_pool, [rng.standard_normal((2, 3, 4 + e, 5))]),
        "max_pool2d": (lambda x: F.max_pool2d(x, 2),
                       [rng.permutation(2 * 3 * side * side).reshape(2, 3, side, side) / 10.0]),
        "avg_pool_grid": (lambda x: F.avg_pool_grid(x, 3), [rng.standard_normal((2, 2, 5 + e, 5 + e))]),
        "resize_bilinear": (lambda x: F.resize_bilinear(x, 7, 5), [rng.standard_normal((1, 2, 4 + e, 3))]),
        "batchnorm2d": (lambda x, g, b: F.batchnorm2d(x, g, b, np.zeros(3), np.ones(3)),
                        [rng.standard_normal((3 + e, 3, 4, 4)), rng.uniform(0.5, 1.5, 3), rng.standard_normal(3)]),
        "batchnorm2d_affine": (lambda x, g, b: F.batchnorm2d(x, g, b, np.zeros(3), np.ones(3), mode="affine"),
                               [rng.standard_normal((1, 3, 4 + e, 4)), rng.uniform(0.5, 1.5, 3), rng.standard_normal(3)]),
        "softmax_cross_entropy": (lambda z: F.softmax_cross_entropy(z, labels), [rng.standard_normal((2, 3, 4 + e, 4))]),
    }


def check_gradients_ops() -> Tuple[bool, str]:
    errors = {}
    for extent in GRADIENT_EXTENTS:
        cases = _op_cases(np.random.default_rng(5 + extent), extent)
        for name, (fn, inputs) in cases.items():
            errors[f"{name}@{extent}"] = grad_check(fn, inputs)
    worst = max(errors, key=errors.get)
    return errors[worst] < OP_TOLERANCE, f"worst {worst} rel. err {errors[worst]:.2e}"


def check_gradients_eac() -> Tuple[bool, str]:
    rng = np.random.default_rng(6)
    modules = [EacModule(8, rng), EacModule(8, rng)]
    for m in modules:
        m.to_dtype(np.float64)
    single = grad_check(lambda x, k: modules[0](x)[1], [rng.standard_normal((2, 8, 3, 3)), modules[0].kernel])
    fused = grad_check(lambda a, b, m: fuse_stage([a, b], modules, m),
                       [rng.standard_normal((2, 8, 3, 3)), rng.standard_normal((2, 8, 3, 3)),
                        rng.standard_normal((2, 8, 3, 3))])
    worst = max(single, fused)
    return worst < OP_TOLERANCE, f"eac {single:.2e}, fuse_stage {fused:.2e}"


def tiny_model_config(seed: int = 0, num_classes: int = 3) -> EafnetConfig:
    return EafnetConfig(branches=[BranchSpec(name="rgb", sources=["rgb"]), BranchSpec(name="aolp", sources=["aolp"])],
                        widths=[4, 4, 4, 4, 4], blocks_per_stage=1, num_classes=num_classes, spp_levels=[1, 2],
                        decoder_width=4, input_size=32, seed=seed)


def check_gradients_model() -> Tuple[bool, str]:
    rng = np.random.default_rng(7)
    model = EAFNet(tiny_model_config()).to_dtype(np.float64).train()
    inputs = [Tensor(rng.random((4, 3, 32, 32))), Tensor(rng.random((4, 1, 32, 32)))]
    labels = rng.integers(0, 3, (4, 32, 32))

    def loss(*_params: Tensor) -> Tensor:
        return F.softmax_cross_entropy(model(inputs), labels)
    error = grad_check(loss, model.parameters(), eps=1e-6, max_elements=2)
    return error < MODEL_TOLERANCE, f"end-to-end rel. err {error:.2e}"


def _brute_force(labels: np.ndarray, preds: np.ndarray, k: int) -> List[Tuple[Optional[float], ...]]:
    rows = []
    for c in range(k):
        tp = fp = fn = 0
        for truth, guess in zip(labels.ravel().tolist(), preds.ravel().tolist()):
            tp += truth == c and guess == c
            fp += truth != c and guess == c
            fn += truth == c and guess != c
        rows.append((tp / (tp + fp + fn) if tp + fp + fn else None,
                     tp / (tp + fp) if tp + fp else None,
                     tp / (tp + fn) if tp + fn else None))
    return rows


def check_metrics_oracle() -> Tuple[bool, str]:
    rng = np.random.default_rng(8)
    k = 5
    for trial in range(100):
        labels = rng.integers(0, k, (16, 16))
        preds = rng.integers(0, k, (16, 16))
        report = compute_metrics(update_confusion(ConfusionMatrix(k), labels, preds), evaluated=range(1, k))
        oracle = _brute_force(labels, preds, k)
        got = [(c.iou, c.precision, c.recall) for c in report.classes]
        defined = [row[0] for c, row in enumerate(oracle) if c >= 1 and row[0] is not None]
        if got != oracle or report.miou != (float(np.mean(defined)) if defined else None):
            return False, f"mismatch at trial {trial}"
    return True, "100 trials exact"


def _tiny_data(count: int, prefix: str):
    scene = SyntheticSceneConfig.two_material(height=32, width=32, num_classes=3, seed=9)
    return synthesize_dataset(scene, count, prefix)


def check_sharded_eval() -> Tuple[bool, str]:
    model = EAFNet(tiny_model_config())
    schema = ClassSchema(name="tiny", class_names=["Background", "A", "B"], evaluated=[1, 2])
    samples = _tiny_data(5, "val")
    sequential = evaluate(model, samples, schema, shards=1)
    sharded = evaluate(model, samples, schema, shards=3)
    return sequential == sharded, f"sequential mIoU {sequential.miou}, sharded mIoU {sharded.miou}"


def check_checkpoint_roundtrip() -> Tuple[bool, str]:
    model = EAFNet(tiny_model_config(seed=3))
    blob = encode_checkpoint(model)
    cfg, state = decode_checkpoint(blob)
    restored = EAFNet(cfg)
    restored.load_state_dict(state)
    return encode_checkpoint(restored) == blob, f"{len(blob)} bytes"


CHECKS: Dict[str, CheckFn] = {
    "stokes_roundtrip": check_stokes_roundtrip,
    "dolp_aolp_ranges": check_dolp_aolp,
    "fresnel": check_fresnel,
    "kernel_size_table": check_kernel_table,
    "aolp_flip_involution": check_flip_involution,
    "pder_roundtrip": check_pder_roundtrip,
    "gradients_ops": check_gradients_ops,
    "gradients_eac": check_gradients_eac,
    "gradients_model": check_gradients_model,
    "metrics_oracle": check_metrics_oracle,
    "sharded_evaluation": check_sharded_eval,
    "checkpoint_roundtrip": check_checkpoint_roundtrip,
}


def run_verification(names: Optional[Sequence[str]] = None) -> List[CheckResult]:
    """Run each named check once (all by default); exceptions count as failures."""
    selected = list(CHECKS) if names is None else list(names)
    unknown = [n for n in selected if n not in CHECKS]
    if unknown:
        raise InputValidationError(f"Unknown verification checks {unknown}", details={"available": list(CHECKS)})
    results = []
    for name in selected:
        start = time.perf_counter()
        try:
            passed, detail = CHECKS[name]()
        except Exception as e:
            passed, detail = False, f"{type(e).__name__}: {e}"
        seconds = time.perf_counter() - start
        results.append(CheckResult(name=name, passed=bool(passed), seconds=seconds, detail=detail))
        logger.info(f"[{'PASS' if passed else 'FAIL'}] {name} ({seconds:.2f}s): {detail}")
    return results
