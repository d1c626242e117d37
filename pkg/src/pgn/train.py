"""PGN objectives and the alternating discriminator/generator update loop."""

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from pgn import diffcore as dc
from pgn import metrics
from pgn.models import (
    BLACK_BOX,
    FROM_CLASSIFIER,
    WHITE_BOX,
    FRESH,
    FrozenClassifier,
    build_classifier,
    classify,
    perturb,
)

ENHANCE = "enhance"
ADVERSARIAL = "adversarial"
MODES = (ENHANCE, ADVERSARIAL)

LEAST_SQUARES = "least_squares"
CROSS_ENTROPY = "cross_entropy"
VARIANTS = (LEAST_SQUARES, CROSS_ENTROPY)
VARIANT_ALIASES = {"ls": LEAST_SQUARES, "ce": CROSS_ENTROPY, "lr": CROSS_ENTROPY}

DEFAULT_GAMMA = {ENHANCE: 1e-4, ADVERSARIAL: 3.0}
CE_CLAMP = 1e-6
DIVERGENCE_LIMIT = 1e6


class TrainingError(RuntimeError):
    pass


class DivergenceError(TrainingError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


def canonical_variant(variant):
    variant = VARIANT_ALIASES.get(variant, variant)
    if variant not in VARIANTS:
        raise ValueError(f"unknown loss variant {variant!r}; expected one of {VARIANTS} or ls/ce")
    return variant


@dataclass
class TrainConfig:
    mode: str
    loss_variant: str = LEAST_SQUARES
    gamma: float = None
    lam: float = 1.0
    lr: float = 1e-4
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    access_policy: str = WHITE_BOX
    discriminator_init: str = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        self.loss_variant = canonical_variant(self.loss_variant)
        if self.gamma is None:
            self.gamma = DEFAULT_GAMMA[self.mode]
        if self.discriminator_init is None:
            self.discriminator_init = FROM_CLASSIFIER if self.access_policy == WHITE_BOX else FRESH
        if self.access_policy not in (WHITE_BOX, BLACK_BOX):
            raise ValueError(f"unknown access policy {self.access_policy!r}")
        if self.discriminator_init not in (FROM_CLASSIFIER, FRESH):
            raise ValueError(f"unknown discriminator init {self.discriminator_init!r}")
        if self.access_policy == BLACK_BOX and self.discriminator_init == FROM_CLASSIFIER:
            raise ValueError("a label-only classifier cannot seed the discriminator trunk")
        if not self.gamma >= 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------- targets and losses


def assign_targets(r, l, mode):
    """Discriminator targets: 1 where the perturbation met the mode's goal."""
    r, l = np.asarray(r), np.asarray(l)
    if r.shape != l.shape:
        raise ValueError(f"assign_targets: {r.shape[0] if r.ndim else r} predictions vs {l.shape} labels")
    if mode == ENHANCE:
        return (r == l).astype(np.int64)
    if mode == ADVERSARIAL:
        return (r != l).astype(np.int64)
    raise ValueError(f"unknown mode {mode!r}")


def _check_open_unit(o):
    data = o.data if isinstance(o, dc.Tensor) else np.asarray(o)
    if data.size == 0:
        raise ValueError("empty discriminator output")
    if np.any(~np.isfinite(data)) or np.any(data <= 0) or np.any(data >= 1):
        raise ValueError("discriminator outputs must lie strictly inside (0, 1)")


def discriminator_loss(o, g, variant=LEAST_SQUARES):
    """Mean-normalised discriminator loss, 1/(2N) times the per-sample sum."""
    variant = canonical_variant(variant)
    o = dc.as_tensor(o)
    _check_open_unit(o)
    o = dc.reshape(o, (-1,))
    g = np.asarray(g, dtype=dc.DTYPE).reshape(-1)
    if g.shape != o.shape:
        raise ValueError(f"discriminator_loss: {o.shape[0]} outputs vs {g.shape[0]} targets")
    n = o.shape[0]
    if variant == LEAST_SQUARES:
        per = dc.add(dc.mul(dc.square(dc.sub(o, 1.0)), g), dc.mul(dc.square(o), 1.0 - g))
    else:
        oc = dc.clip(o, CE_CLAMP, 1.0 - CE_CLAMP)
        per = dc.add(dc.mul(dc.log(oc), -g), dc.mul(dc.log(dc.sub(1.0, oc)), -(1.0 - g)))
    return dc.mul(dc.sum(per), 1.0 / (2 * n))


def generator_adversarial_term(o, variant=LEAST_SQUARES):
    """Pushes every discriminator output toward 1, regardless of targets."""
    variant = canonical_variant(variant)
    o = dc.as_tensor(o)
    _check_open_unit(o)
    o = dc.reshape(o, (-1,))
    n = o.shape[0]
    if variant == LEAST_SQUARES:
        return dc.mul(dc.sum(dc.square(dc.sub(o, 1.0))), 1.0 / (2 * n))
    return dc.mul(dc.sum(dc.log(dc.clip(o, CE_CLAMP, 1.0 - CE_CLAMP))), -1.0 / n)


def l1_regularizer(M):
    """Batch mean of per-image L1 norms."""
    M = dc.as_tensor(M)
    return dc.mul(dc.sum(dc.absolute(M)), 1.0 / M.shape[0])


def generator_loss(o, M, gamma, variant=LEAST_SQUARES):
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    adv = generator_adversarial_term(o, variant)
    if gamma == 0:
        return adv
    return dc.add(adv, dc.mul(l1_regularizer(M), float(gamma)))


# ---------------------------------------------------------------- Algorithm loop


@dataclass
class StepResult:
    L_d: float
    L_g: float
    L_r: float
    L_total: float
    correct: int
    wrong: int
    r: np.ndarray = field(repr=False)
    g: np.ndarray = field(repr=False)
    o_first: np.ndarray = field(repr=False)
    o_second: np.ndarray = field(repr=False)
    d_registry: list = field(repr=False, default_factory=list)
    g_registry: list = field(repr=False, default_factory=list)


class _Frozen:
    """Temporarily mark a network's trainable parameters as non-trainable."""

    def __init__(self, net):
        self.params = net.trainable_parameters()

    def __enter__(self):
        for p in self.params:
            p.requires_grad = False

    def __exit__(self, *exc):
        for p in self.params:
            p.requires_grad = True


def _finite_or_raise(name, value, context):
    if not math.isfinite(value):
        raise TrainingError(f"non-finite {name} ({value}) {context}")


def train_step(images, labels, G, D, f, cfg, opt_g, opt_d):
    """One discriminator update followed by one generator update on a batch."""
    I = dc.Tensor(images)
    M = G(I)
    J = perturb(I, M, cfg.lam)
    r = classify(f, J)
    J_fixed = J.detach()

    opt_d.zero_grad()
    o = D(J_fixed)
    o_first = o.data.reshape(-1).copy()
    g = assign_targets(r, labels, cfg.mode)
    L_d = discriminator_loss(o, g, cfg.loss_variant)
    _finite_or_raise("L_d", L_d.item(), f"(o range [{o_first.min():.3g}, {o_first.max():.3g}])")
    d_registry = dc.backward(L_d)
    opt_d.step()

    opt_g.zero_grad()
    with _Frozen(D):
        o2 = D(J)
        o_second = o2.data.reshape(-1).copy()
        L_g = generator_adversarial_term(o2, cfg.loss_variant)
        L_r = l1_regularizer(M)
        L_total = generator_loss(o2, M, cfg.gamma, cfg.loss_variant)
        _finite_or_raise("L_g'", L_total.item(), f"(L_r={L_r.item():.6g}, |M|max={np.abs(M.data).max():.3g})")
        g_registry = dc.backward(L_total)
    opt_g.step()

    correct = int(np.sum(r == labels))
    return StepResult(
        L_d=L_d.item(),
        L_g=L_g.item(),
        L_r=L_r.item(),
        L_total=L_total.item(),
        correct=correct,
        wrong=len(labels) - correct,
        r=r,
        g=g,
        o_first=o_first,
        o_second=o_second,
        d_registry=d_registry,
        g_registry=g_registry,
    )


def make_optimizers(G, D, cfg):
    return dc.Adam(G.trainable_parameters(), lr=cfg.lr), dc.Adam(D.trainable_parameters(), lr=cfg.lr)


@dataclass
class TrainState:
    """Everything needed to resume a run mid-way."""

    epoch: int
    rows: list
    rng: object


def train_pgn(
    images,
    labels,
    G,
    D,
    f,
    cfg,
    eval_images=None,
    eval_labels=None,
    state=None,
    stop_after=None,
    on_epoch_end=None,
    step_hook=None,
):
    """Run ``cfg.epochs`` epochs of shuffled minibatch training.

    Metrics for each epoch are measured on ``eval_images`` (the training set
    when omitted).  ``state`` resumes a previous run; ``stop_after`` ends the
    run early after that epoch (for checkpoint/resume).  ``on_epoch_end`` is
    called as ``on_epoch_end(epoch, row, state)``.

    Returns ``(G, D, rows, state)``.
    """
    images = np.asarray(images, dtype=dc.DTYPE)
    labels = np.asarray(labels)
    if len(images) == 0:
        raise TrainingError("empty training set")
    if not f.frozen:
        raise TrainingError("target classifier must be frozen")
    if eval_images is None:
        eval_images, eval_labels = images, labels
    if state is None:
        state = TrainState(epoch=0, rows=[], rng=dc.make_rng(cfg.seed))
    opt_g, opt_d = make_optimizers(G, D, cfg)
    vanilla = classify(f, eval_images)
    n, bs = len(images), cfg.batch_size
    last = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)

    for epoch in range(state.epoch + 1, last + 1):
        order = state.rng.permutation(n)
        sums = np.zeros(3)
        steps = 0
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            res = train_step(images[idx], labels[idx], G, D, f, cfg, opt_g, opt_d)
            if step_hook is not None:
                step_hook(epoch, res)
            sums += (res.L_d, res.L_g, res.L_r)
            steps += 1
            if max(abs(res.L_d), abs(res.L_total)) > DIVERGENCE_LIMIT:
                raise DivergenceError(
                    f"loss diverged at epoch {epoch} (L_d={res.L_d:.4g}, L_g'={res.L_total:.4g})",
                    checkpoint=state,
                )
        ev = metrics.evaluate_perturbation(G, f, eval_images, eval_labels, cfg.lam, vanilla=vanilla)
        L_d, L_g, L_r = sums / steps
        row = metrics.MetricsRow(
            epoch=epoch,
            L_d=float(L_d),
            L_g=float(L_g),
            L_r=float(L_r),
            top1=ev["top1"],
            mAP=ev["mAP"],
            pos_transitions=ev["pos"],
            neg_transitions=ev["neg"],
        )
        state = TrainState(epoch=epoch, rows=state.rows + [row], rng=state.rng)
        if on_epoch_end is not None:
            on_epoch_end(epoch, row, state)
    return G, D, state.rows, state


# ---------------------------------------------------------------- target classifier


def train_classifier(
    images,
    labels,
    spec,
    lr=5e-4,
    epochs=10,
    batch_size=32,
    seed=0,
    val_images=None,
    val_labels=None,
    target_accuracy=None,
    check_every=None,
    access_policy=WHITE_BOX,
    log=None,
):
    """Softmax cross-entropy training of a classifier, returned frozen.

    With ``target_accuracy`` the run stops at the first check (every
    ``check_every`` batches, default once per epoch) whose validation accuracy
    reaches the target, leaving a deliberately under-trained model.
    """
    images = np.asarray(images, dtype=dc.DTYPE)
    labels = np.asarray(labels)
    if len(images) != len(labels):
        raise TrainingError(f"{len(images)} images but {len(labels)} labels")
    if labels.max() >= spec.num_classes:
        raise TrainingError(f"label {labels.max()} outside classifier arity {spec.num_classes}")
    if target_accuracy is not None and val_images is None:
        raise TrainingError("target_accuracy needs a validation split")
    rng = dc.make_rng(seed)
    net = build_classifier(spec, rng)
    opt = dc.Adam(net.parameters(), lr=lr)
    n = len(images)
    per_epoch = math.ceil(n / batch_size)
    check_every = check_every or per_epoch
    history = []
    done = False
    step = 0
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            opt.zero_grad()
            loss = dc.softmax_cross_entropy(net(dc.Tensor(images[idx])), labels[idx])
            dc.backward(loss)
            opt.step()
            step += 1
            if val_images is not None and (step % check_every == 0 or step == per_epoch * epochs):
                acc = _accuracy(net, val_images, val_labels)
                history.append((epoch, step, acc))
                if log:
                    log(f"classifier epoch {epoch} step {step}: val acc {acc:.4f}")
                if target_accuracy is not None and acc >= target_accuracy:
                    done = True
                    break
        if done:
            break
    f = FrozenClassifier(net, access_policy)
    f.vanilla_predictions = classify(f, images)
    f.vanilla_accuracy = metrics.top1_accuracy(f.vanilla_predictions, labels)
    f.history = history
    return f


def _accuracy(net, images, labels, batch=256):
    preds = np.concatenate(
        [np.argmax(net(dc.Tensor(images[i : i + batch])).data, axis=1) for i in range(0, len(images), batch)]
    )
    return float(np.mean(preds == labels))
