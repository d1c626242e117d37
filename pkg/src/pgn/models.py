"""Classifier, generator and discriminator builders.

Networks are described declaratively by :class:`NetworkSpec` (a list of
:class:`LayerSpec`) and instantiated as :class:`Network`.  Shape inference
runs on a NetworkSpec alone, so large reference architectures can be validated
without allocating their weights.
"""

import copy
import hashlib
from dataclasses import dataclass, field

import numpy as np

from pgn import diffcore as dc


class SpecError(ValueError):
    """A network description violates its role's shape contract."""


class AccessPolicyError(PermissionError):
    """Requested classifier information the access policy does not expose."""


WHITE_BOX = "white_box_logits"
BLACK_BOX = "black_box_labels"
ACCESS_POLICIES = (WHITE_BOX, BLACK_BOX)

LAYER_KINDS = ("conv", "deconv", "dense", "avgpool", "gap", "flatten")
ACTIVATIONS = ("none", "relu", "sigmoid")
ROLES = ("classifier", "generator", "discriminator")


@dataclass
class LayerSpec:
    kind: str
    channels: int = 0
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    activation: str = "none"

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise SpecError(f"unknown layer kind {self.kind!r}; expected one of {LAYER_KINDS}")
        if self.activation not in ACTIVATIONS:
            raise SpecError(f"unknown activation {self.activation!r}; expected one of {ACTIVATIONS}")
        if self.kernel < 1 or self.stride < 1 or self.padding < 0:
            raise SpecError(f"bad kernel/stride/padding in {self}")

    def to_token(self):
        return f"{self.kind}:{self.channels}:{self.kernel}:{self.stride}:{self.padding}:{self.activation}"

    @classmethod
    def from_token(cls, token):
        parts = token.strip().split(":")
        if len(parts) != 6:
            raise SpecError(
                f"layer token {token!r} must be kind:channels:kernel:stride:padding:activation"
            )
        kind, ch, k, s, p, act = parts
        try:
            return cls(kind, int(ch), int(k), int(s), int(p), act)
        except ValueError:
            raise SpecError(f"layer token {token!r} has a non-integer field") from None


@dataclass
class NetworkSpec:
    name: str
    role: str
    input_shape: tuple
    layers: list = field(default_factory=list)
    num_classes: int = 0
    encoder_depth: int = 0  # generator only: leading layers that form the encoder
    zero_final: bool = False

    def layers_string(self):
        return ", ".join(layer.to_token() for layer in self.layers)


def spec_to_dict(spec):
    return {
        "name": spec.name,
        "role": spec.role,
        "input_shape": list(spec.input_shape),
        "layers": [layer.to_token() for layer in spec.layers],
        "num_classes": spec.num_classes,
        "encoder_depth": spec.encoder_depth,
        "zero_final": spec.zero_final,
    }


def spec_from_dict(d):
    try:
        return NetworkSpec(
            d["name"],
            d["role"],
            tuple(d["input_shape"]),
            [LayerSpec.from_token(t) for t in d["layers"]],
            num_classes=d.get("num_classes", 0),
            encoder_depth=d.get("encoder_depth", 0),
            zero_final=d.get("zero_final", False),
        )
    except (KeyError, TypeError) as exc:
        raise SpecError(f"malformed network description: {exc}") from None

def infer_shapes(spec):
    """Per-layer output shapes (without batch dim); raises SpecError on mismatch."""
    shape = tuple(spec.input_shape)
    shapes = []
    for idx, layer in enumerate(spec.layers):
        where = f"{spec.name} layer {idx} ({layer.kind})"
        if layer.kind in ("conv", "deconv", "avgpool"):
            if len(shape) != 3:
                raise SpecError(f"{where}: expects an image-shaped input, got {shape}")
            c, h, w = shape
            k, s, p = layer.kernel, layer.stride, layer.padding
            if layer.kind == "deconv":
                h, w = (h - 1) * s - 2 * p + k, (w - 1) * s - 2 * p + k
            else:
                if h + 2 * p < k or w + 2 * p < k:
                    raise SpecError(f"{where}: kernel {k} larger than padded input {shape}")
                h, w = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
            if layer.kind != "avgpool":
                if layer.channels < 1:
                    raise SpecError(f"{where}: channels must be positive")
                c = layer.channels
            if h < 1 or w < 1:
                raise SpecError(f"{where}: non-positive output size {h}x{w}")
            shape = (c, h, w)
        elif layer.kind == "gap":
            if len(shape) != 3:
                raise SpecError(f"{where}: expects an image-shaped input, got {shape}")
            shape = (shape[0],)
        elif layer.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif layer.kind == "dense":
            if len(shape) != 1:
                raise SpecError(f"{where}: dense needs a flat input, got {shape}; add gap or flatten")
            if layer.channels < 1:
                raise SpecError(f"{where}: units must be positive")
            shape = (layer.channels,)
        shapes.append(shape)
    return shapes


def _scale_factor(layers):
    f = 1.0
    for layer in layers:
        if layer.kind in ("conv", "avgpool"):
            f /= layer.stride
        elif layer.kind == "deconv":
            f *= layer.stride
    return f


def validate_spec(spec):
    """Check the role contract; returns the inferred output shape."""
    if spec.role not in ROLES:
        raise SpecError(f"{spec.name}: unknown role {spec.role!r}")
    if not spec.layers:
        raise SpecError(f"{spec.name}: no layers")
    shapes = infer_shapes(spec)
    out = shapes[-1]
    last = spec.layers[-1]
    if spec.role == "classifier":
        if last.kind != "dense" or out != (spec.num_classes,) or spec.num_classes < 2:
            raise SpecError(
                f"{spec.name}: classifier must end in a dense layer with num_classes={spec.num_classes} "
                f"units, got output {out}"
            )
    elif spec.role == "discriminator":
        if last.kind != "dense" or out != (1,) or last.activation != "sigmoid":
            raise SpecError(f"{spec.name}: discriminator must end in one dense unit with sigmoid")
    else:
        enc, dec = spec.layers[: spec.encoder_depth], spec.layers[spec.encoder_depth :]
        if not enc or not dec:
            raise SpecError(f"{spec.name}: generator needs a non-empty encoder and decoder")
        down, up = 1.0 / _scale_factor(enc), _scale_factor(dec)
        if down != up:
            raise SpecError(
                f"{spec.name}: decoder upsamples x{up:g} but encoder downsamples x{down:g}"
            )
        if out != tuple(spec.input_shape):
            raise SpecError(f"{spec.name}: generator output {out} != input {tuple(spec.input_shape)}")
    return out


# ---------------------------------------------------------------- desk-scale defaults


def default_classifier_spec(num_classes=10, input_shape=(3, 32, 32), widths=(16, 32, 64, 64)):
    layers = [LayerSpec("conv", widths[0], 3, 1, 1, "relu")]
    layers += [LayerSpec("conv", w, 3, 2, 1, "relu") for w in widths[1:]]
    layers += [LayerSpec("gap"), LayerSpec("dense", num_classes)]
    return NetworkSpec("classifier", "classifier", tuple(input_shape), layers, num_classes=num_classes)


def default_generator_spec(input_shape=(3, 32, 32), widths=(16, 32, 64), zero_final=True):
    """Three stride-2 encoder stages; decoder of two (4x4/2, 3x3, 3x3) blocks and a final 4x4/2."""
    c = input_shape[0]
    enc = [LayerSpec("conv", w, 4, 2, 1, "relu") for w in widths]
    dec = []
    for w in reversed(widths[:-1]):
        dec += [
            LayerSpec("deconv", w, 4, 2, 1, "relu"),
            LayerSpec("deconv", w, 3, 1, 1, "relu"),
            LayerSpec("deconv", w, 3, 1, 1, "relu"),
        ]
    dec.append(LayerSpec("deconv", c, 4, 2, 1, "none"))
    return NetworkSpec(
        "generator", "generator", tuple(input_shape), enc + dec, encoder_depth=len(enc), zero_final=zero_final,
    )


def default_discriminator_spec(input_shape=(3, 32, 32), widths=(24, 48, 96)):
    """Target-independent discriminator for the label-only setting."""
    layers = [LayerSpec("conv", w, 3, 2, 1, "relu") for w in widths]
    layers += [LayerSpec("gap"), LayerSpec("dense", 1, activation="sigmoid")]
    return NetworkSpec("discriminator", "discriminator", tuple(input_shape), layers)


def reference_generator_spec():
    """Full-resolution (224x224) generator with the 13-layer deconvolution decoder.

    The encoder is a shape stand-in for a ResNet trunk (x32 downsampling to
    2048 channels).  Intended for validation only: instantiating it would
    allocate several hundred megabytes.
    """
    enc = [LayerSpec("conv", c, 4, 2, 1, "relu") for c in (64, 256, 512, 1024, 2048)]
    channels = [2048, 1024, 512, 512, 256, 256, 256, 128, 128, 128, 64, 64, 3]
    dec = []
    for block in range(4):
        for pos, k, s in ((0, 4, 2), (1, 3, 1), (2, 3, 1)):
            dec.append(LayerSpec("deconv", channels[3 * block + pos], k, s, 1, "relu"))
    dec.append(LayerSpec("deconv", channels[12], 4, 2, 1, "none"))
    return NetworkSpec("reference_generator", "generator", (3, 224, 224), enc + dec, encoder_depth=len(enc))


# ---------------------------------------------------------------- networks


def _instantiate(layer, in_shape, rng, zero_init=False):
    if layer.kind == "conv":
        mod = dc.Conv2d(in_shape[0], layer.channels, layer.kernel, layer.stride, layer.padding, rng, zero_init)
    elif layer.kind == "deconv":
        mod = dc.ConvTranspose2d(
            in_shape[0], layer.channels, layer.kernel, layer.stride, layer.padding, rng, zero_init
        )
    elif layer.kind == "dense":
        mod = dc.Dense(in_shape[0], layer.channels, rng, zero_init)
    elif layer.kind == "avgpool":
        mod = dc.AvgPool2d(layer.kernel, layer.stride)
    elif layer.kind == "gap":
        mod = dc.GlobalAvgPool()
    else:
        mod = dc.Flatten()
    mods = [mod]
    if layer.activation == "relu":
        mods.append(dc.ReLU())
    elif layer.activation == "sigmoid":
        mods.append(dc.Sigmoid())
    return mods


class Network:
    """Instantiated NetworkSpec: an ordered list of layer blocks."""

    def __init__(self, spec, rng):
        validate_spec(spec)
        self.spec = spec
        shapes = [tuple(spec.input_shape)] + infer_shapes(spec)
        last = len(spec.layers) - 1
        self.blocks = [
            dc.Sequential(_instantiate(layer, shapes[i], rng, zero_init=spec.zero_final and i == last))
            for i, layer in enumerate(spec.layers)
        ]

    def forward(self, x, start=0, stop=None):
        for block in self.blocks[start:stop]:
            x = block(x)
        return x

    __call__ = forward

    def named_parameters(self):
        out = []
        for i, block in enumerate(self.blocks):
            for p in block.parameters():
                out.append((f"{self.spec.name}.{i}.{self.spec.layers[i].kind}.{p.name}", p))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.trainable]

    def set_trainable(self, flag, stop=None):
        for block in self.blocks[:stop]:
            for p in block.parameters():
                p.requires_grad = bool(flag)

    def checksum(self):
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(p.data.astype("<f4").tobytes())
        return h.hexdigest()


def build_classifier(spec, rng):
    if spec.role != "classifier":
        raise SpecError(f"{spec.name}: expected a classifier spec, got role {spec.role!r}")
    return Network(spec, rng)


def build_generator(spec, rng):
    if spec.role != "generator":
        raise SpecError(f"{spec.name}: expected a generator spec, got role {spec.role!r}")
    return Network(spec, rng)


FROM_CLASSIFIER = "from_classifier_trunk"
FRESH = "fresh"


def build_discriminator(spec=None, init=FRESH, rng=None, classifier=None, train_trunk=True):
    """Discriminator mapping images to a per-image score in (0, 1).

    ``init="from_classifier_trunk"`` copies every classifier layer except the
    final dense layer and adds a fresh one-unit sigmoid head.  The copy starts
    equal to the classifier and trains with the rest of the discriminator;
    ``train_trunk=False`` freezes it.  ``init="fresh"`` builds ``spec`` from
    scratch and never touches the classifier.
    """
    if init == FROM_CLASSIFIER:
        if classifier is None:
            raise SpecError("from_classifier_trunk initialisation needs a classifier")
        net = classifier.network if isinstance(classifier, FrozenClassifier) else classifier
        cspec = net.spec
        if cspec.role != "classifier" or cspec.layers[-1].kind != "dense":
            raise SpecError(f"{cspec.name}: incompatible trunk, expected a classifier ending in dense")
        trunk = [copy.deepcopy(layer) for layer in cspec.layers[:-1]]
        dspec = NetworkSpec(
            "discriminator",
            "discriminator",
            tuple(cspec.input_shape),
            trunk + [LayerSpec("dense", 1, activation="sigmoid")],
        )
        disc = Network(dspec, rng)
        for mine, theirs in zip(disc.blocks[:-1], net.blocks[:-1]):
            for p, q in zip(mine.parameters(), theirs.parameters()):
                if p.shape != q.shape:
                    raise SpecError(f"trunk shape mismatch {p.shape} vs {q.shape}")
                p.data = q.data.copy()
        disc.set_trainable(train_trunk, stop=len(disc.blocks) - 1)
        return disc
    if init != FRESH:
        raise SpecError(f"unknown discriminator init {init!r}")
    if spec is None:
        raise SpecError("fresh discriminator needs a spec")
    if spec.role != "discriminator":
        raise SpecError(f"{spec.name}: expected a discriminator spec, got role {spec.role!r}")
    disc = Network(spec, rng)
    if train_trunk is False:
        disc.set_trainable(False, stop=len(disc.blocks) - 1)
    return disc


# ---------------------------------------------------------------- classifier wrapper


class FrozenClassifier:
    """A trained classifier with fixed parameters and an access policy."""

    def __init__(self, network, access_policy=WHITE_BOX, batch_size=256):
        if access_policy not in ACCESS_POLICIES:
            raise AccessPolicyError(f"unknown access policy {access_policy!r}")
        network.set_trainable(False)
        self.network = network
        self.access_policy = access_policy
        self.batch_size = batch_size
        self.vanilla_predictions = None
        self.vanilla_accuracy = None

    @property
    def frozen(self):
        return not any(p.trainable for p in self.network.parameters())

    def with_policy(self, access_policy):
        other = FrozenClassifier(self.network, access_policy, self.batch_size)
        other.vanilla_predictions = self.vanilla_predictions
        other.vanilla_accuracy = self.vanilla_accuracy
        return other

    def logits(self, images):
        if self.access_policy != WHITE_BOX:
            raise AccessPolicyError("classifier logits are not exposed under black_box_labels")
        return self._logits(images)

    def _logits(self, images):
        images = images.data if isinstance(images, dc.Tensor) else np.asarray(images, dc.DTYPE)
        chunks = [
            self.network(dc.Tensor(images[i : i + self.batch_size])).data
            for i in range(0, len(images), self.batch_size)
        ]
        return np.concatenate(chunks, axis=0)

    def logits_tensor(self, x):
        """Differentiable forward pass (white-box only, used by gradient baselines)."""
        if self.access_policy != WHITE_BOX:
            raise AccessPolicyError("classifier gradients are not exposed under black_box_labels")
        return self.network(x)

    def checksum(self):
        return self.network.checksum()


def argmax_lowest(logits):
    """Row-wise argmax; exact ties go to the lowest class index."""
    return np.argmax(np.asarray(logits), axis=1)


def classify(f, J, return_logits=False):
    """Labels predicted by ``f`` on ``J`` (and logits when asked and allowed).

    Inputs are detached first, so no gradient path runs through the classifier.
    """
    if return_logits and f.access_policy != WHITE_BOX:
        raise AccessPolicyError("classifier logits are not exposed under black_box_labels")
    z = f._logits(J)
    labels = argmax_lowest(z)
    return (labels, z) if return_logits else labels


def perturb(I, M, lam):
    """J = I + lam * M, differentiable in M, no clipping."""
    I, M = dc.as_tensor(I), dc.as_tensor(M)
    if I.shape != M.shape:
        raise dc.ShapeError(f"perturb: image shape {I.shape} != perturbation shape {M.shape}")
    return dc.add(I, dc.mul(M, float(lam)))


@dataclass
class PerturbationBatch:
    """Aligned per-sample records for one training batch."""

    I: np.ndarray
    M: np.ndarray
    J: np.ndarray
    l: np.ndarray
    r: np.ndarray
    g: np.ndarray
    o: np.ndarray
    lam: float

    def check(self):
        if not (self.I.shape == self.M.shape == self.J.shape):
            raise dc.ShapeError("PerturbationBatch: I, M, J shapes differ")
        if not np.array_equal(self.J, (self.I + np.float32(self.lam) * self.M).astype(dc.DTYPE)):
            raise ValueError("PerturbationBatch: J != I + lambda * M")
        if np.any(self.o <= 0) or np.any(self.o >= 1):
            raise ValueError("PerturbationBatch: discriminator outputs must lie in (0, 1)")
        return True
