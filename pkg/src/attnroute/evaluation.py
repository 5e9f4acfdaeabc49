"""Task metrics under a fixed plan or live hard routing."""
from __future__ import annotations

import numpy as np

from . import model as M
from . import router as R
from . import tasks as TK
from . import tensor as T


def _forced_logits(weights: M.TransformerWeights, examples: list[TK.Example],
                   plan: M.RoutingPlan) -> np.ndarray:
    inputs, _ = TK.batch_arrays(examples)
    with T.no_grad():
        res = M.prefill(inputs, weights, None, M.ForcedRouting(plan))
    return res.logits.data


def retrieval_accuracy(weights: M.TransformerWeights, examples: list[TK.Example],
                       plan: M.RoutingPlan) -> float:
    """Fraction of query slots answered with the right value token."""
    logits = _forced_logits(weights, examples, plan)
    hits = total = 0
    for i, ex in enumerate(examples):
        pred = logits[i, ex.eval_positions].argmax(axis=-1)
        hits += int((pred == ex.answers).sum())
        total += ex.answers.size
    return hits / total


def holistic_perplexity(weights: M.TransformerWeights, examples: list[TK.Example],
                        plan: M.RoutingPlan) -> float:
    """exp(mean NLL) over the supervised positions of a holistic stream."""
    inputs, targets = TK.batch_arrays(examples)
    with T.no_grad():
        res = M.prefill(inputs, weights, None, M.ForcedRouting(plan))
        loss = T.cross_entropy(res.logits, targets)
    return float(np.exp(loss.item()))


def routed_metrics(weights: M.TransformerWeights, routers: R.LayerRouters,
                   examples: list[TK.Example], category: str):
    """Hard-routed per-example evaluation: (metric, mean realized sparsity).

    Retrieval reports accuracy; holistic reports perplexity. Each example gets
    its own prefill-time plan, mirroring deployment.
    """
    omegas = []
    hits = total = 0
    nll_sum, nll_count = 0.0, 0
    for ex in examples:
        with T.no_grad():
            res = M.prefill(ex.lm_inputs(), weights, routers, M.HardRouting())
        omegas.append(M.model_sparsity_ratio(res.plan, weights.config.n_heads))
        if category == TK.RETRIEVAL:
            pred = res.logits.data[ex.eval_positions].argmax(axis=-1)
            hits += int((pred == ex.answers).sum())
            total += ex.answers.size
        else:
            targets = ex.lm_targets()
            loss = T.cross_entropy(res.logits, targets)
            live = int((targets != -1).sum())
            nll_sum += loss.item() * live
            nll_count += live
    metric = hits / total if category == TK.RETRIEVAL else float(np.exp(nll_sum / nll_count))
    return metric, float(np.mean(omegas))
