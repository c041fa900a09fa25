"""Variational autoencoder over one-hot household rows.

Encoder: six affine+batchnorm+ReLU blocks, then separate affine+batchnorm
heads for mu and logsig. Decoder: six mirrored blocks, then an affine output
head followed by a per-variable group softmax, so every decoded row is a
stack of category distributions.

Persistence is a versioned binary format: an 8-byte magic, a length-prefixed
JSON header (schema fingerprint, dims, hyperparameters, array directory) and
the arrays as little-endian float64 in directory order. Round trips are
bit-exact, including batch-norm running statistics.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .schema import Schema, ColumnGroup, column_layout

MODEL_MAGIC = b"PSVAE01\n"
MODEL_VERSION = 1

DEFAULT_ENCODER_WIDTHS = (512, 384, 256, 192, 128, 96)
DEFAULT_LATENT_DIM = 64
N_BLOCKS = 6


class ModelFormatError(ValueError):
    """Raised when a model file is malformed or from an unknown version."""


@dataclass(frozen=True)
class VaeHyperparams:
    latent_dim: int = DEFAULT_LATENT_DIM
    encoder_widths: tuple[int, ...] = DEFAULT_ENCODER_WIDTHS
    decoder_widths: tuple[int, ...] = tuple(reversed(DEFAULT_ENCODER_WIDTHS))
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    init_seed: int = 0

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if len(self.encoder_widths) != N_BLOCKS or len(self.decoder_widths) != N_BLOCKS:
            raise ValueError(f"expected {N_BLOCKS} hidden widths per side")
        if any(w < 1 for w in self.encoder_widths + self.decoder_widths):
            raise ValueError("hidden widths must be >= 1")


def _block(in_dim, out_dim, rng, eps, momentum, name):
    return [
        nn.Affine(in_dim, out_dim, rng, f"{name}.affine"),
        nn.BatchNorm(out_dim, eps=eps, momentum=momentum, name=f"{name}.bn"),
        nn.Relu(f"{name}.relu"),
    ]


class VaeModel:
    def __init__(
        self,
        d: int,
        groups: tuple[ColumnGroup, ...],
        schema_fingerprint: str,
        hyper: VaeHyperparams,
    ):
        self.d = d
        self.groups = groups
        self.schema_fingerprint = schema_fingerprint
        self.hyper = hyper
        rng = np.random.default_rng(hyper.init_seed)
        eps, mom = hyper.bn_eps, hyper.bn_momentum

        layers = []
        width = d
        for i, w in enumerate(hyper.encoder_widths):
            layers.extend(_block(width, w, rng, eps, mom, f"enc{i}"))
            width = w
        self.encoder = nn.Chain(layers)
        self.mu_affine = nn.Affine(width, hyper.latent_dim, rng, "mu.affine")
        self.mu_bn = nn.BatchNorm(hyper.latent_dim, eps=eps, momentum=mom, name="mu.bn")
        self.logsig_affine = nn.Affine(width, hyper.latent_dim, rng, "logsig.affine")
        self.logsig_bn = nn.BatchNorm(
            hyper.latent_dim, eps=eps, momentum=mom, name="logsig.bn"
        )

        layers = []
        width = hyper.latent_dim
        for i, w in enumerate(hyper.decoder_widths):
            layers.extend(_block(width, w, rng, eps, mom, f"dec{i}"))
            width = w
        self.decoder = nn.Chain(layers)
        self.out_affine = nn.Affine(width, d, rng, "out.affine")
        self.out_softmax = nn.GroupSoftmax(
            [(g.start, g.stop) for g in groups], "out.softmax"
        )

    @property
    def latent_dim(self) -> int:
        return self.hyper.latent_dim

    # -- forward / backward ------------------------------------------------

    def encode(self, x: np.ndarray, train: bool = False):
        h = self.encoder.forward(x, train=train)
        mu = self.mu_bn.forward(self.mu_affine.forward(h, train), train)
        logsig = self.logsig_bn.forward(self.logsig_affine.forward(h, train), train)
        return mu, logsig

    def encode_backward(self, dmu, dlogsig, with_params: bool = True):
        dh = self.mu_affine.backward(
            self.mu_bn.backward(dmu, with_params), with_params
        )
        dh += self.logsig_affine.backward(
            self.logsig_bn.backward(dlogsig, with_params), with_params
        )
        return self.encoder.backward(dh, with_params=with_params)

    def decode(self, z: np.ndarray, train: bool = False) -> np.ndarray:
        h = self.decoder.forward(z, train=train)
        return self.out_softmax.forward(self.out_affine.forward(h, train), train)

    def decode_backward(self, dprobs, with_params: bool = True):
        dh = self.out_affine.backward(
            self.out_softmax.backward(dprobs, with_params), with_params
        )
        return self.decoder.backward(dh, with_params=with_params)

    # -- state ---------------------------------------------------------------

    def parameters(self) -> list[nn.Param]:
        out = self.encoder.params()
        out += self.mu_affine.params() + self.mu_bn.params()
        out += self.logsig_affine.params() + self.logsig_bn.params()
        out += self.decoder.params() + self.out_affine.params()
        return out

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def _batchnorms(self) -> list[nn.BatchNorm]:
        bns = [l for l in self.encoder.layers if isinstance(l, nn.BatchNorm)]
        bns += [self.mu_bn, self.logsig_bn]
        bns += [l for l in self.decoder.layers if isinstance(l, nn.BatchNorm)]
        return bns

    def state_items(self) -> list[tuple[str, np.ndarray]]:
        """Every persisted array (parameters plus running statistics), in the
        fixed order that defines the file layout."""
        items = [(p.name, p.value) for p in self.parameters()]
        for bn in self._batchnorms():
            items.append((f"{bn.name}.running_mean", bn.running_mean))
            items.append((f"{bn.name}.running_var", bn.running_var))
        return items

    def decoder_state_items(self) -> list[tuple[str, np.ndarray]]:
        return [
            (n, a)
            for n, a in self.state_items()
            if n.split(".")[0].startswith(("dec", "out"))
        ]

    def checksum(self, items=None) -> str:
        h = hashlib.sha256()
        for name, arr in items if items is not None else self.state_items():
            h.update(name.encode("utf-8"))
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()

    def decoder_checksum(self) -> str:
        return self.checksum(self.decoder_state_items())


def init_model(
    schema: Schema,
    latent_dim: int = DEFAULT_LATENT_DIM,
    hidden_widths: tuple[int, ...] | None = None,
    seed: int = 0,
) -> VaeModel:
    """Build a freshly initialised model for a resolved schema.

    ``hidden_widths`` gives the six encoder widths; the decoder mirrors them.
    Initialisation is uniform in +/- sqrt(6 / (fan_in + fan_out)), biases and
    batch-norm shifts zero, deterministic in the seed.
    """
    groups, d = column_layout(schema)
    widths = tuple(hidden_widths) if hidden_widths else DEFAULT_ENCODER_WIDTHS
    hyper = VaeHyperparams(
        latent_dim=latent_dim,
        encoder_widths=widths,
        decoder_widths=tuple(reversed(widths)),
        init_seed=seed,
    )
    return VaeModel(d, groups, schema.fingerprint(), hyper)


# ---------------------------------------------------------------------------
# persistence


def save_model(model: VaeModel, path) -> None:
    items = model.state_items()
    header = {
        "format": "psvae",
        "version": MODEL_VERSION,
        "schema_fingerprint": model.schema_fingerprint,
        "d": model.d,
        "groups": [[g.var, g.slot, g.start, g.width] for g in model.groups],
        "hyperparams": {
            "latent_dim": model.hyper.latent_dim,
            "encoder_widths": list(model.hyper.encoder_widths),
            "decoder_widths": list(model.hyper.decoder_widths),
            "bn_eps": model.hyper.bn_eps,
            "bn_momentum": model.hyper.bn_momentum,
            "init_seed": model.hyper.init_seed,
        },
        "dtype": "<f8",
        "arrays": [[name, list(arr.shape)] for name, arr in items],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, arr in items:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_model(path) -> VaeModel:
    with open(path, "rb") as fh:
        magic = fh.read(len(MODEL_MAGIC))
        if magic != MODEL_MAGIC:
            raise ModelFormatError(f"{path}: not a model file (bad magic)")
        (hlen,) = struct.unpack("<I", fh.read(4))
        try:
            header = json.loads(fh.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ModelFormatError(f"{path}: corrupt header: {exc}") from None
        if header.get("version") != MODEL_VERSION:
            raise ModelFormatError(
                f"{path}: unsupported model version {header.get('version')!r}"
            )
        groups = tuple(
            ColumnGroup(var, slot, start, width)
            for var, slot, start, width in header["groups"]
        )
        hp = header["hyperparams"]
        hyper = VaeHyperparams(
            latent_dim=hp["latent_dim"],
            encoder_widths=tuple(hp["encoder_widths"]),
            decoder_widths=tuple(hp["decoder_widths"]),
            bn_eps=hp["bn_eps"],
            bn_momentum=hp["bn_momentum"],
            init_seed=hp["init_seed"],
        )
        model = VaeModel(header["d"], groups, header["schema_fingerprint"], hyper)
        by_name = dict(model.state_items())
        for name, shape in header["arrays"]:
            if name not in by_name:
                raise ModelFormatError(f"{path}: unknown array {name!r}")
            arr = by_name[name]
            if list(arr.shape) != shape:
                raise ModelFormatError(f"{path}: shape mismatch for {name!r}")
            raw = fh.read(arr.size * 8)
            if len(raw) != arr.size * 8:
                raise ModelFormatError(f"{path}: truncated while reading {name!r}")
            arr[...] = np.frombuffer(raw, dtype="<f8").reshape(arr.shape)
        if fh.read(1):
            raise ModelFormatError(f"{path}: trailing bytes after the last array")
    return model
