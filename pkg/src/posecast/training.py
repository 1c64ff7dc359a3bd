"""Losses, the optimizer, and the training loop.

Motion is supervised with a per-layer L1 term: every decoder layer's
prediction is held to the target, and the motion loss is the mean of
those per-layer means. Activity classification adds a cross-entropy
term scaled by a mixing weight. The optimizer is Adam with decoupled
weight decay and a linear learning-rate warmup.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, ShapeError, Tensor
from .data import NormalizationStats, Window
from .metrics import classification_accuracy
from .model import MotionTransformer, save_checkpoint


# ---------------------------------------------------------------------------
# losses


def layerwise_l1_loss(prediction: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error over every entry of one layer's prediction."""
    if prediction.shape != target.shape:
        raise ShapeError(
            f"prediction {prediction.shape} does not match target {target.shape}"
        )
    count = prediction.data.size
    return ad.scale(ad.sum_all(ad.absolute(prediction - target)), 1.0 / count)


def motion_loss(layer_predictions: list[Tensor], target: Tensor) -> Tensor:
    """Average the L1 term over all decoder layers."""
    if not layer_predictions:
        raise ContractError("motion_loss needs at least one layer prediction")
    total = layerwise_l1_loss(layer_predictions[0], target)
    for prediction in layer_predictions[1:]:
        total = total + layerwise_l1_loss(prediction, target)
    return ad.scale(total, 1.0 / len(layer_predictions))


def cross_entropy_loss(logits: Tensor, label: int) -> Tensor:
    """Negative log softmax probability of the true class.

    Implemented as a fused node: the forward value comes from the
    numerically safe log-sum-exp, and the backward rule is the softmax
    minus the one-hot target.
    """
    values = logits.data.reshape(-1)
    num_classes = values.size
    if not 0 <= label < num_classes:
        raise ContractError(
            f"label {label} outside the {num_classes} known classes"
        )
    shifted = values - values.max()
    log_sum = np.log(np.exp(shifted).sum()) + values.max()
    loss_value = log_sum - values[label]

    softmax = np.exp(shifted) / np.exp(shifted).sum()
    one_hot = np.zeros(num_classes)
    one_hot[label] = 1.0

    def backward(out_grad):
        grad = float(out_grad) * (softmax - one_hot)
        return (grad.reshape(logits.data.shape),)

    return ad.custom_op(loss_value, (logits,), backward)


def total_loss(motion: Tensor, activity: Tensor | None,
               activity_weight: float) -> Tensor:
    if activity is None or activity_weight == 0.0:
        return motion
    return motion + ad.scale(activity, activity_weight)


# ---------------------------------------------------------------------------
# optimization


def warmup_lr(step: int, base_lr: float, warmup_steps: int) -> float:
    """Linear ramp from zero over the warmup, then the base rate.
    Steps are 1-based."""
    if step < 1:
        raise ContractError(f"steps are 1-based, got {step}")
    if warmup_steps <= 0 or step >= warmup_steps:
        return base_lr
    return base_lr * step / warmup_steps


def clip_gradients(params, max_norm: float = 1.0) -> float:
    """Scale all gradients down so their global L2 norm is at most
    ``max_norm``. Returns the pre-clip norm."""
    tensors = list(params.values() if isinstance(params, dict) else params)
    total = 0.0
    for p in tensors:
        if p.grad is None:
            raise ContractError("clip_gradients found a parameter without a gradient")
        total += float((p.grad * p.grad).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        for p in tensors:
            p.grad = p.grad * factor
    return norm


class AdamW:
    """Adam with decoupled weight decay.

    Moments follow the usual exponential averages with bias correction;
    the decay is applied directly to the weights after the adaptive
    update, scaled by the current learning rate.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 weight_decay: float = 1e-5, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8):
        if not params:
            raise ContractError("optimizer needs at least one parameter")
        if lr < 0.0 or weight_decay < 0.0:
            raise ContractError("learning rate and weight decay must be >= 0")
        self.params = dict(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self, lr: float | None = None) -> None:
        rate = self.lr if lr is None else lr
        self.step_count += 1
        correct1 = 1.0 - self.beta1 ** self.step_count
        correct2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params.items():
            if p.grad is None:
                raise ContractError(f"parameter {name!r} has no gradient")
            grad = p.grad
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * grad
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * grad * grad
            m_hat = self.m[name] / correct1
            v_hat = self.v[name] / correct2
            p.data = p.data - rate * m_hat / (np.sqrt(v_hat) + self.eps)
            if self.weight_decay > 0.0:
                p.data = p.data - rate * self.weight_decay * p.data

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def export_state(self) -> dict:
        state: dict = {"step_count": self.step_count}
        for name in self.params:
            state[name] = {"m": self.m[name].copy(), "v": self.v[name].copy()}
        return state

    def restore_state(self, state: dict) -> None:
        self.step_count = int(state.get("step_count", 0))
        for name in self.params:
            if name not in state:
                raise ContractError(f"optimizer state lacks moments for {name!r}")
            entry = state[name]
            if entry["m"].shape != self.params[name].data.shape:
                raise ContractError(f"optimizer moments for {name!r} have wrong shape")
            self.m[name] = entry["m"].copy()
            self.v[name] = entry["v"].copy()


# ---------------------------------------------------------------------------
# the loop


@dataclass
class TrainConfig:
    total_steps: int
    batch_size: int = 16
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    warmup_steps: int = -1  # -1 means a tenth of total_steps
    activity_weight: float = 1.0
    clip_norm: float = 1.0
    seed: int = 0
    eval_interval: int = 0  # 0 means evaluate only at the end

    def __post_init__(self):
        if self.total_steps < 1:
            raise ContractError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.warmup_steps == -1:
            self.warmup_steps = self.total_steps // 10
        if self.warmup_steps < 0:
            raise ContractError("warmup_steps must be >= 0")
        if self.activity_weight < 0.0:
            raise ContractError("activity_weight must be >= 0")
        if self.clip_norm <= 0.0:
            raise ContractError("clip_norm must be > 0")
        if self.eval_interval < 0:
            raise ContractError("eval_interval must be >= 0")


@dataclass
class LogRow:
    step: int
    lr: float
    loss_total: float
    loss_motion: float
    loss_activity: float | None
    eval_l1: float | None = None
    eval_accuracy: float | None = None


@dataclass
class TrainingLog:
    rows: list[LogRow] = field(default_factory=list)

    def to_csv(self, path) -> None:
        def cell(value):
            return "" if value is None else f"{value:.12g}"

        lines = ["step,lr,loss_total,loss_motion,loss_activity,eval_l1,eval_accuracy"]
        for r in self.rows:
            lines.append(",".join([
                str(r.step), f"{r.lr:.12g}", f"{r.loss_total:.12g}",
                f"{r.loss_motion:.12g}", cell(r.loss_activity),
                cell(r.eval_l1), cell(r.eval_accuracy),
            ]))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


class _BatchSampler:
    """Shuffled epochs, refilled across the boundary so every batch is
    full-size when the dataset allows it."""

    def __init__(self, count: int, batch_size: int, rng: np.random.Generator):
        self.count = count
        self.batch_size = min(batch_size, count)
        self.rng = rng
        self.order = rng.permutation(count)
        self.cursor = 0

    def next_batch(self) -> np.ndarray:
        picked = []
        while len(picked) < self.batch_size:
            if self.cursor >= self.count:
                self.order = self.rng.permutation(self.count)
                self.cursor = 0
            take = min(self.batch_size - len(picked), self.count - self.cursor)
            picked.extend(self.order[self.cursor:self.cursor + take])
            self.cursor += take
        return np.asarray(picked)


def trainable_parameters(model: MotionTransformer,
                          train_activity: bool) -> dict[str, Tensor]:
    # Without an activity term the head gets no gradients, and decoupled
    # weight decay would still shrink it, so it leaves the optimizer
    # entirely and stays at its initial values.
    params = model.named_parameters()
    if not train_activity:
        params = {name: p for name, p in params.items()
                  if not name.startswith("activity_head.")}
    return params


def evaluate(model: MotionTransformer, windows: list[Window]) -> tuple[float, float | None]:
    """Mean final-layer L1 over the windows, plus classification
    accuracy when both labels and a head are present."""
    if not windows:
        raise ContractError("evaluate needs at least one window")
    l1_values = []
    logits_rows = []
    labels = []
    for window in windows:
        prediction = model.predict(window.input_frames,
                                   target_len=window.target_frames.shape[0])
        l1_values.append(np.abs(prediction.frames - window.target_frames).mean())
        if prediction.logits is not None and window.label is not None:
            logits_rows.append(prediction.logits)
            labels.append(window.label)
    accuracy = None
    if logits_rows:
        accuracy = classification_accuracy(np.array(logits_rows), np.array(labels))
    return float(np.mean(l1_values)), accuracy


def train_loop(model: MotionTransformer, windows: list[Window],
               config: TrainConfig, eval_windows: list[Window] | None = None,
               checkpoint_path=None, stats: NormalizationStats | None = None,
               optimizer: AdamW | None = None, start_step: int = 0) -> TrainingLog:
    """Run ``config.total_steps`` optimizer steps and return the log.

    Each step draws a shuffled batch, averages the per-window losses in
    one graph, backpropagates once, clips the global gradient norm, and
    applies one warmed-up optimizer step. Evaluation (and a checkpoint,
    when a path is given) happens every ``eval_interval`` steps and
    always at the end. ``start_step`` offsets the step numbering so a
    resumed run continues its schedule.
    """
    if not windows:
        raise ContractError("train_loop needs a non-empty window list")
    has_labels = all(w.label is not None for w in windows)
    train_activity = (config.activity_weight > 0.0 and has_labels
                      and model.activity_head is not None)
    params = trainable_parameters(model, train_activity)
    if optimizer is None:
        optimizer = AdamW(params, lr=config.learning_rate,
                          weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    sampler = _BatchSampler(len(windows), config.batch_size, rng)
    model.seed_dropout(int(rng.integers(2 ** 62)))
    log = TrainingLog()

    for local_step in range(1, config.total_steps + 1):
        step = start_step + local_step
        model.train()
        batch = sampler.next_batch()
        motion_terms = []
        activity_terms = []
        for index in batch:
            window = windows[index]
            result = model.forward(window.input_frames,
                                   target_len=window.target_frames.shape[0])
            motion_terms.append(motion_loss(result.layer_predictions,
                                            Tensor(window.target_frames)))
            if train_activity:
                activity_terms.append(cross_entropy_loss(result.logits,
                                                         window.label))
        batch_motion = motion_terms[0]
        for term in motion_terms[1:]:
            batch_motion = batch_motion + term
        batch_motion = ad.scale(batch_motion, 1.0 / len(motion_terms))
        batch_activity = None
        if activity_terms:
            batch_activity = activity_terms[0]
            for term in activity_terms[1:]:
                batch_activity = batch_activity + term
            batch_activity = ad.scale(batch_activity, 1.0 / len(activity_terms))
        loss = total_loss(batch_motion, batch_activity, config.activity_weight)

        optimizer.zero_grads()
        loss.backward()
        clip_gradients(params, config.clip_norm)
        lr = warmup_lr(step, config.learning_rate, config.warmup_steps)
        optimizer.step(lr)

        row = LogRow(
            step=step, lr=lr, loss_total=loss.item(),
            loss_motion=batch_motion.item(),
            loss_activity=None if batch_activity is None else batch_activity.item(),
        )
        due = (config.eval_interval > 0 and local_step % config.eval_interval == 0)
        if (due or local_step == config.total_steps) and eval_windows:
            model.eval()
            row.eval_l1, row.eval_accuracy = evaluate(model, eval_windows)
            if checkpoint_path is not None:
                save_checkpoint(model, checkpoint_path, step=step, stats=stats,
                                optimizer_state=optimizer.export_state())
        log.rows.append(row)

    model.eval()
    if checkpoint_path is not None and not eval_windows:
        save_checkpoint(model, checkpoint_path, step=start_step + config.total_steps,
                        stats=stats, optimizer_state=optimizer.export_state())
    return log
