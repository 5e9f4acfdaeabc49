"""Router training under budgeted sparsity, plus backbone pretraining.

Router training is a min-max game: the router parameters descend on

    L_language + lambda1 * L_diff + lambda2 * L_diff^2

while the per-task multipliers (lambda1, lambda2) ascend on the sparsity
deviation L_diff = mean(1 - r_soft) - budget. The backbone stays frozen; a
gradient step never touches the multipliers and a dual step never touches
router parameters. Batches round-robin over tasks so no task's budget
dominates the routing signal.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from . import router as R
from . import tasks as TK
from . import tensor as T
from .errors import ContractError
from .rng import spawn_seeds, substream

LAMBDA_CAP = 100.0  # keeps the monotone lambda2 ascent from blowing up


@dataclass
class DualVariables:
    """Per-task Lagrange multipliers; projected to stay non-negative."""

    lam1: float
    lam2: float

    def __post_init__(self):
        if self.lam1 < 0 or self.lam2 < 0:
            raise ContractError("multipliers must be non-negative")


def sparsity_deviation(r_soft_layers: list, budget: float):
    """mean over layers (and the task sub-batch) of (1 - r_soft), minus budget.

    Accepts Tensors (training path, differentiable) or floats.
    """
    n = len(r_soft_layers)
    if n == 0:
        raise ContractError("no routing weights given")
    if isinstance(r_soft_layers[0], T.Tensor):
        acc = T.tmean(r_soft_layers[0])
        for r in r_soft_layers[1:]:
            acc = acc + T.tmean(r)
        mean_r = acc * (1.0 / n)
        return (1.0 - mean_r) - budget
    mean_r = float(np.mean([np.mean(r) for r in r_soft_layers]))
    return (1.0 - mean_r) - budget


def total_loss(l_lang, l_diff, lam1: float, lam2: float):
    """Language loss plus linear and quadratic sparsity penalties."""
    if lam1 < 0 or lam2 < 0:
        raise ContractError("multipliers must be non-negative")
    return l_lang + lam1 * l_diff + lam2 * (l_diff * l_diff)


def dual_ascent_step(lam1: float, lam2: float, l_diff: float, lr_dual: float):
    """Projected gradient ascent on the multipliers."""
    new1 = min(LAMBDA_CAP, max(0.0, lam1 + lr_dual * l_diff))
    new2 = min(LAMBDA_CAP, max(0.0, lam2 + lr_dual * l_diff * l_diff))
    return new1, new2


# -- optimizer -----------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay.

    Decay applies to matrices only (never biases or norm gains); callers can
    exempt further tensors, e.g. embedding tables, via ``no_decay``.
    """

    def __init__(self, params: list[T.Tensor], lr: float = 5e-4,
                 betas: tuple[float, float] = (0.9, 0.95), eps: float = 1e-8,
                 weight_decay: float = 0.1, no_decay: list[T.Tensor] | None = None):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        exempt = {id(p) for p in (no_decay or [])}
        self.decay_mask = [p.data.ndim > 1 and id(p) not in exempt for p in params]
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, lr_scale: float = 1.0) -> None:
        self.t += 1
        b1, b2 = self.betas
        lr = self.lr * lr_scale
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * (g * g)
            update = (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            if self.weight_decay and self.decay_mask[i]:
                update = update + self.weight_decay * p.data
            p.data -= (lr * update).astype(p.data.dtype)


def warmup_cosine(step: int, total: int, warmup_ratio: float) -> float:
    """Linear warmup to 1.0 over the first warmup fraction, then cosine to 0."""
    warm = max(1, int(total * warmup_ratio))
    if step < warm:
        return (step + 1) / warm
    span = max(1, total - warm)
    prog = min(1.0, (step - warm) / span)
    return 0.5 * (1.0 + math.cos(math.pi * prog))


def clip_grad_norm(params: list[T.Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


# -- history -------------------------------------------------------------------


@dataclass
class TrainHistory:
    """Append-only per-step record of the min-max dynamics."""

    task_names: list[str]
    steps: list[dict] = field(default_factory=list)
    probes: list[dict] = field(default_factory=list)

    def append(self, row: dict) -> None:
        self.steps.append(row)

    def csv_header(self) -> list[str]:
        cols = ["step", "l_lang"]
        for name in self.task_names:
            cols.append(f"l_diff_{name}")
        for name in self.task_names:
            cols.append(f"r_soft_mean_{name}")
        cols.append("tau")
        for name in self.task_names:
            cols.append(f"lambda1_{name}")
        for name in self.task_names:
            cols.append(f"lambda2_{name}")
        return cols

    def csv_rows(self):
        for row in self.steps:
            out = [row["step"], row["l_lang"]]
            out += [row["l_diff"][n] for n in self.task_names]
            out += [row["r_soft_mean"][n] for n in self.task_names]
            out.append(row["tau"])
            out += [row["lambda1"][n] for n in self.task_names]
            out += [row["lambda2"][n] for n in self.task_names]
            yield out


# -- router training -----------------------------------------------------------


@dataclass
class RouterTrainConfig:
    steps: int = 300
    batch: int = 8
    lr_router: float = 5e-4
    lr_dual: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.1
    warmup_ratio: float = 0.2
    tau_init: float = 1.0
    tau_final: float = 0.1
    update_duals: bool = True  # False reproduces the unconstrained failure mode
    lambda_init_high: float = 0.1


def _task_subbatch(task: TK.TaskSpec, data_rng, batch: int, length: int | None = None):
    if length is None:
        length = task.sample_length(data_rng)
    seeds = spawn_seeds(data_rng, batch)
    examples = TK.gen_batch(task, seeds, length)
    return TK.batch_arrays(examples)


def curriculum_length(task: TK.TaskSpec, step: int, total: int, rng,
                      ramp_frac: float = 0.5, start: int = 56) -> int:
    """Length schedule: short sequences early (where copy circuits form
    quickly), the task's full range once the ramp completes."""
    lo, hi = task.seq_range
    frac = min(1.0, step / max(1, int(total * ramp_frac)))
    cur_hi = int(min(lo, start) + (hi - min(lo, start)) * frac)
    cur_lo = min(min(lo, start), cur_hi)
    return int(rng.integers(cur_lo, cur_hi + 1))


def train_router(
    weights: M.TransformerWeights,
    routers: R.LayerRouters,
    task_list: list[TK.TaskSpec],
    cfg: RouterTrainConfig,
    root_seed: int,
) -> tuple[dict[str, DualVariables], TrainHistory]:
    """Optimize the routers against frozen backbone weights.

    Every step runs one Soft-prefill sub-batch per task (round-robin balance),
    takes a single router gradient step on the summed objective, then a dual
    ascent step per task, then anneals the temperature. Routers and duals are
    updated in place / returned; the history records the monitored series.
    """
    if not weights.frozen:
        raise ContractError("backbone must be frozen before router training")
    if not task_list:
        raise ContractError("need at least one task")
    sub = max(1, cfg.batch // len(task_list))

    data_rng = substream(root_seed, "data")
    gumbel_rng = substream(root_seed, "gumbel")
    dual_rng = substream(root_seed, "dual")

    duals = {
        t.name: DualVariables(*(dual_rng.uniform(0.0, cfg.lambda_init_high, size=2)))
        if cfg.update_duals
        else DualVariables(0.0, 0.0)
        for t in task_list
    }
    sched = R.TemperatureSchedule(cfg.tau_init, cfg.tau_final, cfg.steps)
    opt = AdamW(routers.params(), lr=cfg.lr_router, betas=cfg.betas,
                weight_decay=cfg.weight_decay)
    history = TrainHistory([t.name for t in task_list])
    params = routers.params()

    for step in range(cfg.steps):
        tau = R.anneal(sched, step)
        lr_scale = warmup_cosine(step, cfg.steps, cfg.warmup_ratio)
        T.zero_grads(params)

        loss_total = None
        row = {"step": step, "tau": tau, "l_diff": {}, "r_soft_mean": {},
               "lambda1": {}, "lambda2": {}}
        lang_sum = 0.0
        for task in task_list:
            inputs, targets = _task_subbatch(task, data_rng, sub)
            res = M.prefill(inputs, weights, routers, M.SoftRouting(tau, gumbel_rng))
            l_lang = T.cross_entropy(res.logits, targets)
            l_diff = sparsity_deviation(res.r_soft, task.budget)
            d = duals[task.name]
            task_loss = total_loss(l_lang, l_diff, d.lam1, d.lam2)
            loss_total = task_loss if loss_total is None else loss_total + task_loss

            l_diff_val = l_diff.item()
            lang_sum += l_lang.item()
            row["l_diff"][task.name] = l_diff_val
            row["r_soft_mean"][task.name] = float(
                np.mean([np.mean(r.data) for r in res.r_soft])
            )

        loss_total = loss_total * (1.0 / len(task_list))
        if not np.isfinite(loss_total.item()):
            raise FloatingPointError(
                f"non-finite loss at step {step}: l_lang={lang_sum}, duals={duals}"
            )
        T.backward(loss_total)
        opt.step(lr_scale)

        for task in task_list:
            d = duals[task.name]
            if cfg.update_duals:
                lam1, lam2 = dual_ascent_step(
                    d.lam1, d.lam2, row["l_diff"][task.name], cfg.lr_dual * lr_scale
                )
                duals[task.name] = DualVariables(lam1, lam2)
            row["lambda1"][task.name] = duals[task.name].lam1
            row["lambda2"][task.name] = duals[task.name].lam2

        row["l_lang"] = lang_sum / len(task_list)
        history.append(row)

    return duals, history


# -- backbone pretraining --------------------------------------------------------


@dataclass
class PretrainConfig:
    steps: int = 1200
    batch: int = 16
    lr: float = 2.5e-3
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.05
    warmup_ratio: float = 0.1
    grad_clip: float = 1.0
    curriculum_ramp: float = 0.5  # fraction of steps over which lengths grow
    curriculum_start: int = 64
    probe_examples: int = 32
    retrieval_target: float = 0.95
    holistic_ppl_factor: float = 1.10


@dataclass
class PretrainReport:
    retrieval_accuracy: float
    holistic_ppl: float
    bigram_ppl: float
    final_loss: float
    ok: bool


def pretrain_backbone(
    config: M.ModelConfig,
    task_list: list[TK.TaskSpec],
    cfg: PretrainConfig,
    root_seed: int,
) -> tuple[M.TransformerWeights, PretrainReport]:
    """Train a dense (all full-attention) backbone on the task mixture.

    Finishes by freezing the weights and probing: needle retrieval accuracy
    must beat ``retrieval_target`` and holistic perplexity must stay within
    ``holistic_ppl_factor`` of an in-sample bigram model. A failed probe is
    reported, never silently ignored.
    """
    from . import evaluation as E

    init_rng = substream(root_seed, "init")
    data_rng = substream(root_seed, "data")
    weights = M.TransformerWeights.init(config, init_rng)
    opt = AdamW(weights.params(), lr=cfg.lr, betas=cfg.betas,
                weight_decay=cfg.weight_decay,
                no_decay=[weights.tok_embed, weights.pos_embed])
    dense = M.ForcedRouting(M.forced_plan([1] * config.n_layers))
    params = weights.params()

    final_loss = float("nan")
    for step in range(cfg.steps):
        T.zero_grads(params)
        loss = None
        for task in task_list:
            length = curriculum_length(task, step, cfg.steps, data_rng,
                                       cfg.curriculum_ramp, cfg.curriculum_start)
            inputs, targets = _task_subbatch(
                task, data_rng, max(1, cfg.batch // len(task_list)), length
            )
            res = M.prefill(inputs, weights, None, dense)
            l = T.cross_entropy(res.logits, targets)
            loss = l if loss is None else loss + l
        loss = loss * (1.0 / len(task_list))
        final_loss = loss.item()
        if not np.isfinite(final_loss):
            raise FloatingPointError(f"non-finite pretraining loss at step {step}")
        T.backward(loss)
        if cfg.grad_clip:
            clip_grad_norm(params, cfg.grad_clip)
        opt.step(warmup_cosine(step, cfg.steps, cfg.warmup_ratio))

    weights.set_frozen(True)

    probe_rng = substream(root_seed, "probe")
    retrieval = [t for t in task_list if t.category == TK.RETRIEVAL]
    holistic = [t for t in task_list if t.category == TK.HOLISTIC]
    acc = 1.0
    ppl = big = 1.0
    plan = M.forced_plan([1] * config.n_layers)
    if retrieval:
        probes = TK.gen_batch(retrieval[0], spawn_seeds(probe_rng, cfg.probe_examples),
                              retrieval[0].seq_range[1])
        acc = E.retrieval_accuracy(weights, probes, plan)
    if holistic:
        probes = TK.gen_batch(holistic[0], spawn_seeds(probe_rng, cfg.probe_examples),
                              holistic[0].seq_range[1])
        ppl = E.holistic_perplexity(weights, probes, plan)
        big = TK.bigram_perplexity([e.tokens for e in probes])

    report = PretrainReport(
        retrieval_accuracy=acc,
        holistic_ppl=ppl,
        bigram_ppl=big,
        final_loss=final_loss,
        ok=(acc >= cfg.retrieval_target) and (ppl <= cfg.holistic_ppl_factor * big),
    )
    return weights, report
