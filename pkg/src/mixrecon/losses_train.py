"""Losses, optimizer, training loop, and checkpoint plumbing.

The objective is the sum of a reconstruction term (cross-entropy between
predicted and ground-truth query occupancies, computed from logits) and a
denoising term (symmetric halved L2 chamfer distance between the denoised
cloud and ground-truth surface samples).

Training is bit-reproducible: iteration t draws every random choice from
`np.random.default_rng([seed, t])`, so resuming from a checkpoint replays
the identical stream with no state carried across iterations.
"""

import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import diffcore as dc


class TrainingError(RuntimeError):
    """Raised when training aborts (non-finite loss, inconsistent state)."""


class NumericsError(TrainingError):
    """Training aborted on a non-finite value (NaN/inf in the graph)."""


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 6000
    batch_shapes: int = 4
    queries_per_shape: int = 512
    gt_samples: int = 2048
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 1000
    log_every: int = 1
    denoising_weight: float = 1.0

    def __post_init__(self):
        if min(self.iterations, self.batch_shapes, self.queries_per_shape, self.gt_samples) < 1:
            raise ValueError("iteration/batch/query/sample counts must be positive")
        if self.learning_rate <= 0 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ValueError("invalid optimizer constants")
        if self.checkpoint_every < 1 or self.log_every < 1:
            raise ValueError("cadences must be positive")
        if self.denoising_weight < 0:
            raise ValueError("denoising_weight must be >= 0")


@dataclass
class LossReport:
    iteration: int
    l_rec: float
    l_den: float

    @property
    def total(self):
        return self.l_rec + self.l_den

    def line(self):
        return f"{self.iteration} {self.l_rec:.17g} {self.l_den:.17g} {self.total:.17g}"


# ---------------------------------------------------------------------------
# losses

def chamfer_l2(a, b):
    """Symmetric halved L2 chamfer: (1/2|A|) sum min + (1/2|B|) sum min.

    `a` may be a Tensor (gradients flow through it, with the nearest-pair
    assignment held constant); `b` is treated as constant.
    """
    a_t = a if isinstance(a, dc.Tensor) else dc.constant(np.asarray(a, dtype=np.float64))
    b_arr = b.data if isinstance(b, dc.Tensor) else np.asarray(b, dtype=np.float64)
    a_arr = a_t.data
    if a_arr.shape[0] == 0 or b_arr.shape[0] == 0:
        raise ValueError("chamfer distance of an empty cloud")
    d2 = (
        (a_arr**2).sum(axis=1)[:, None]
        + (b_arr**2).sum(axis=1)[None, :]
        - 2.0 * (a_arr @ b_arr.T)
    )
    idx_ab = np.argmin(d2, axis=1)
    idx_ba = np.argmin(d2, axis=0)
    term_a = dc.scale(
        dc.tensor_sum(dc.square(dc.sub(a_t, dc.constant(b_arr[idx_ab])))),
        0.5 / a_arr.shape[0],
    )
    term_b = dc.scale(
        dc.tensor_sum(dc.square(dc.sub(dc.gather_rows(a_t, idx_ba), dc.constant(b_arr)))),
        0.5 / b_arr.shape[0],
    )
    return dc.add(term_a, term_b)


def bce(pred, labels):
    """Mean binary cross-entropy from probabilities."""
    p = pred if isinstance(pred, dc.Tensor) else dc.constant(pred)
    return dc.binary_cross_entropy(p, labels)


def bce_logits(logits, labels):
    """Mean binary cross-entropy from 2-class logits (stable form)."""
    lt = logits if isinstance(logits, dc.Tensor) else dc.constant(logits)
    return dc.two_class_cross_entropy(lt, labels)


def parameter_count(params):
    """Total number of scalar parameters."""
    return params.count()


# ---------------------------------------------------------------------------
# optimizer: adaptive moment estimation

@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def fresh(cls, params):
        return cls(
            m={n: np.zeros_like(t.data) for n, t in params.items()},
            v={n: np.zeros_like(t.data) for n, t in params.items()},
            step=0,
        )


def adam_step(params, grads, state, config):
    """One in-place update; deterministic given (params, grads, state)."""
    names = set(params.names())
    if set(grads) != names or set(state.m) != names:
        raise ValueError("gradient/state keys do not match parameter names")
    state.step += 1
    b1, b2, eps, lr = config.beta1, config.beta2, config.eps, config.learning_rate
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for name, tensor in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        tensor.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


# ---------------------------------------------------------------------------
# checkpoints with optimizer state

OPT_PREFIX = "opt."


def save_training_checkpoint(path, params, state):
    arrays = {n: t.data for n, t in params.items()}
    for n, arr in state.m.items():
        arrays[f"{OPT_PREFIX}m.{n}"] = arr
    for n, arr in state.v.items():
        arrays[f"{OPT_PREFIX}v.{n}"] = arr
    arrays[f"{OPT_PREFIX}step"] = np.array(float(state.step))
    dc.save_checkpoint(path, arrays)


def load_training_checkpoint(path, params):
    """Restore parameter values and optimizer state into existing params."""
    arrays = dc.load_checkpoint(path)
    step_key = f"{OPT_PREFIX}step"
    if step_key not in arrays:
        raise dc.CheckpointError("missing optimizer step entry", 8)
    state = AdamState(m={}, v={}, step=int(arrays.pop(step_key).reshape(-1)[0]))
    for name in params.names():
        if name not in arrays:
            raise TrainingError(f"checkpoint missing parameter '{name}'")
        if arrays[name].shape != params[name].data.shape:
            raise TrainingError(f"checkpoint shape mismatch for '{name}'")
        params[name].data[...] = arrays[name]
        state.m[name] = arrays[f"{OPT_PREFIX}m.{name}"]
        state.v[name] = arrays[f"{OPT_PREFIX}v.{name}"]
    return state


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainResult:
    history: List[LossReport]
    state: AdamState
    seconds: float


def train(
    dataset,
    net,
    decoder,
    params,
    config,
    log_path=None,
    checkpoint_path=None,
    resume_state=None,
    progress=None,
):
    """Optimize params on the dataset; returns history and optimizer state.

    Iterations are numbered from 1 up to config.iterations. Passing the
    state loaded from a checkpoint as `resume_state` continues that run
    bit-exactly from its recorded step.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    state = resume_state if resume_state is not None else AdamState.fresh(params)
    history = []
    log_file = open(log_path, "a") if log_path else None
    t0 = time.monotonic()
    try:
        for it in range(state.step + 1, config.iterations + 1):
            rng = np.random.default_rng([config.seed, it])
            shape_ids = rng.integers(0, len(dataset), size=config.batch_shapes)
            try:
                with dc.Graph() as graph:
                    rec_terms = []
                    den_terms = []
                    for sid in shape_ids:
                        shape = dataset.shape(int(sid))
                        gt = shape.sample_surface(rng, config.gt_samples)
                        queries, labels = shape.sample_queries(rng, config.queries_per_shape)
                        out = net.denoise(shape.noisy_points)
                        rec_terms.append(bce_logits(decoder.logits(queries, out), labels))
                        den_terms.append(chamfer_l2(out.denoised, gt))
                    inv = 1.0 / config.batch_shapes
                    l_rec = dc.scale(_sum_terms(rec_terms), inv)
                    l_den = dc.scale(_sum_terms(den_terms), inv)
                    if config.denoising_weight == 1.0:
                        objective = dc.add(l_rec, l_den)
                    else:
                        objective = dc.add(l_rec, dc.scale(l_den, config.denoising_weight))
                grads = dc.backward(graph, objective, params)
            except FloatingPointError as e:
                raise NumericsError(f"non-finite value at iteration {it}: {e}") from e
            adam_step(params, grads, state, config)
            report = LossReport(iteration=it, l_rec=l_rec.item(), l_den=l_den.item())
            if it % config.log_every == 0 or it == config.iterations:
                history.append(report)
                if log_file:
                    log_file.write(report.line() + "\n")
                    log_file.flush()
            if checkpoint_path and (it % config.checkpoint_every == 0 or it == config.iterations):
                save_training_checkpoint(checkpoint_path, params, state)
            if progress and (it % 200 == 0 or it == config.iterations):
                progress(report)
    finally:
        if log_file:
            log_file.close()
    return TrainResult(history=history, state=state, seconds=time.monotonic() - t0)


def _sum_terms(terms):
    acc = terms[0]
    for t in terms[1:]:
        acc = dc.add(acc, t)
    return acc
