"""FCN hyperparameter fitness for the swarm optimiser."""

import math
from dataclasses import fields, replace

import numpy as np

from . import pso
from .model import (
    BudgetTracker,
    FcnConfig,
    TrainingDiverged,
    batch_loss,
    build_fcn,
    fit_input_normalization,
    train,
)

TUNABLE = {f.name for f in fields(FcnConfig)} - {
    "in_channels",
    "num_classes",
    "seed",
    "epochs",
}


def default_space():
    return pso.SearchSpace(
        (
            pso.Dimension("learning_rate", 1e-3, 1.0, scale="log"),
            pso.Dimension("batch_size", 2, 16, kind="integer"),
            pso.Dimension("base_filters", 4, 16, kind="integer"),
            pso.Dimension("l2", 1e-6, 1e-2, scale="log"),
        )
    )


def decode_config(values, base):
    """Overlay named hyperparameter values on ``base``."""
    changes = {}
    for name, value in values.items():
        if name not in TUNABLE:
            raise KeyError(f"search dimension {name!r} is not a tunable FcnConfig field")
        changes[name] = value
    return replace(base, **changes)


def evaluate_fcn_fitness(position, space, datasets, base_config, epochs=3, cost_penalty=0.0):
    """Validation cross-entropy of a freshly trained FCN at ``position``.

    ``position`` is in natural units, as handed to fitness callbacks.

    Every candidate is trained with the same seed and epoch count.
    ``datasets`` is ``((train_images, train_labels), (val_images, val_labels))``.
    With ``cost_penalty > 0`` the fitness adds ``cost_penalty * MACs / 1e9``.
    Divergent training scores NaN.
    """
    values = space.named(position)
    cfg = replace(decode_config(values, base_config), epochs=epochs)
    (xtr, ytr), (xva, yva) = datasets
    budget = BudgetTracker()
    model = fit_input_normalization(build_fcn(cfg), xtr)
    try:
        # divergent candidates are expected; detection uses explicit finiteness checks
        with np.errstate(over="ignore", invalid="ignore"):
            model, _ = train(model, (xtr, ytr), (xva, yva), budget)
            loss = batch_loss(model, xva, yva)
    except TrainingDiverged:
        return math.nan
    if not math.isfinite(loss):
        return math.nan
    if cost_penalty > 0:
        loss += cost_penalty * budget.mac_count / 1e9
    return loss


def tune(space, swarm_config, datasets, base_config, epochs=3, callback=None):
    """Run the swarm over FCN hyperparameters; returns ``(config, result)``."""

    def fitness(x):
        return evaluate_fcn_fitness(x, space, datasets, base_config, epochs, swarm_config.cost_penalty)

    result = pso.run(space, swarm_config, fitness, callback=callback)
    best = decode_config(space.named(result.best_position), base_config)
    return best, result
