"""End-to-end models: KCN, KCN-GP, the margin-loss CapsNet and the surrogate CNN.

All models take normalized N×C×H×W batches and share a small interface used
by training, attacks and detection:

* ``loss(x, y, rng)`` -> (scalar loss Tensor to minimize, dict of float components)
* ``attack_loss(x, y, rng, variant)`` -> scalar Tensor whose input gradient drives FGSM
* ``predict_proba(x, rng)`` -> N×Nc numpy probabilities
* ``reconstruct(x, classes)`` -> N×C×H×W Tensor (models with a decoder only)
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from . import svgp
from .capsnet import CapsNet, CapsNetConfig, capsule_lengths, margin_loss
from .decoder import Decoder, mask_capsules, recon_error
from .diffcore import Conv2d, Linear, Module, Tensor, no_grad, ops

CLASSIFICATION_ONLY = "classification"
WITH_RECONSTRUCTION = "classification+reconstruction"


class NoDecoderError(RuntimeError):
    pass


class CapsuleModel(Module):
    kind = "capsule"

    def __init__(self, capsnet: CapsNet, decoder: Optional[Decoder], recon_weight: float):
        self.capsnet = capsnet
        self.decoder = decoder
        self._recon_weight = float(recon_weight)

    @property
    def has_decoder(self) -> bool:
        return self.decoder is not None

    @property
    def num_classes(self) -> int:
        return self.capsnet.config.num_classes

    def capsules(self, x) -> Tensor:
        return self.capsnet(x)

    def reconstruct(self, x, classes, caps: Optional[Tensor] = None) -> Tensor:
        if self.decoder is None:
            raise NoDecoderError(f"{self.kind} has no decoder")
        caps = self.capsules(x) if caps is None else caps
        return self.decoder(mask_capsules(caps, classes))

    def _recon_term(self, x, caps: Tensor, y) -> Tensor:
        return ops.mean(recon_error(x, self.reconstruct(x, y, caps)))

    def predict(self, x, rng=None) -> np.ndarray:
        return svgp.predict_class(self.predict_proba(x, rng))


class KCN(CapsuleModel):
    """CapsNet features -> SVGP classifier, with an optional reconstruction decoder (KCN vs KCN-GP)."""

    def __init__(self, capsnet: CapsNet, head: svgp.SVGPHead, decoder: Optional[Decoder] = None,
                 recon_weight: float = 100.0, dataset_size: Optional[int] = None,
                 mc_train: int = 10, mc_eval: int = 64):
        super().__init__(capsnet, decoder, recon_weight)
        self.head = head
        self._dataset_size = dataset_size
        self._mc_train, self._mc_eval = mc_train, mc_eval

    @property
    def kind(self) -> str:
        return "kcn" if self.decoder is not None else "kcn-gp"

    def features(self, x) -> Tensor:
        caps = self.capsules(x)
        return ops.reshape(caps, (caps.shape[0], -1))

    def loss(self, x, y, rng: np.random.Generator, noise=None):
        caps = self.capsules(x)
        feats = ops.reshape(caps, (caps.shape[0], -1))
        bound = self.head.elbo(feats, y, mc_samples=self._mc_train, rng=rng, noise=noise,
                               dataset_size=self._dataset_size)
        total = -bound
        parts = {"elbo": float(bound.data)}
        if self.decoder is not None:
            rec = self._recon_term(x, caps, y)
            total = total + self._recon_weight * rec
            parts["recon"] = float(rec.data)
        parts["total"] = float(total.data)
        return total, parts

    def attack_loss(self, x, y, rng, variant: str = CLASSIFICATION_ONLY, noise=None) -> Tensor:
        caps = self.capsules(x)
        feats = ops.reshape(caps, (caps.shape[0], -1))
        mean, var = self.head.marginals(feats)
        if noise is None:
            noise = rng.standard_normal((self._mc_train,) + mean.shape)
        loss = -svgp.expected_log_likelihood(mean, var, y, noise)
        if variant == WITH_RECONSTRUCTION:
            if self.decoder is None:
                raise NoDecoderError("kcn-gp has no reconstruction term")
            loss = loss + self._recon_weight * self._recon_term(x, caps, y)
        elif variant != CLASSIFICATION_ONLY:
            raise ValueError(f"unknown attack loss variant {variant!r}")
        return loss

    def posterior(self, x):
        with no_grad():
            feats = self.features(x)
            mean, var = self.head.marginals(feats)
        return mean.data, var.data

    def predict_proba(self, x, rng=None, mc_samples: Optional[int] = None) -> np.ndarray:
        mean, var = self.posterior(x)
        return svgp.predict_probs(mean, var, mc_samples or self._mc_eval, rng or np.random.default_rng(0))


class MarginCapsNet(CapsuleModel):
    """The baseline: capsule lengths as class scores, margin loss plus weighted reconstruction."""

    kind = "capsnet"

    def loss(self, x, y, rng=None, noise=None):
        caps = self.capsules(x)
        margin = ops.sum(margin_loss(caps, y))
        total = margin
        parts = {"margin": float(margin.data)}
        if self.decoder is not None:
            rec = self._recon_term(x, caps, y)
            total = total + self._recon_weight * rec
            parts["recon"] = float(rec.data)
        parts["total"] = float(total.data)
        return total, parts

    def attack_loss(self, x, y, rng=None, variant: str = WITH_RECONSTRUCTION, noise=None) -> Tensor:
        caps = self.capsules(x)
        loss = ops.sum(margin_loss(caps, y))
        if variant == WITH_RECONSTRUCTION and self.decoder is not None:
            loss = loss + self._recon_weight * self._recon_term(x, caps, y)
        elif variant not in (CLASSIFICATION_ONLY, WITH_RECONSTRUCTION):
            raise ValueError(f"unknown attack loss variant {variant!r}")
        return loss

    def predict_proba(self, x, rng=None) -> np.ndarray:
        """Capsule lengths renormalized to sum to one (a score, not a calibrated probability)."""
        with no_grad():
            lengths = capsule_lengths(self.capsules(x)).data
        return lengths / lengths.sum(axis=-1, keepdims=True)


class SurrogateCNN(Module):
    """Black-box attack surrogate: C(c,32,5,1,2)-pool-C(32,64,5,1,2)-pool-affine(.,Nc)."""

    kind = "surrogate"
    has_decoder = False

    def __init__(self, image_shape: Sequence[int], num_classes: int, rng: np.random.Generator):
        c, h, w = image_shape
        self.num_classes = num_classes
        self.conv1 = Conv2d(c, 32, 5, 1, 2, rng=rng)
        self.conv2 = Conv2d(32, 64, 5, 1, 2, rng=rng)
        self.fc = Linear(64 * (h // 4) * (w // 4), num_classes, rng, std=np.sqrt(1.0 / (64 * (h // 4) * (w // 4))))

    def logits(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        h = ops.max_pool2d(ops.relu(self.conv1(x)))
        h = ops.max_pool2d(ops.relu(self.conv2(h)))
        return self.fc(ops.reshape(h, (h.shape[0], -1)))

    def loss(self, x, y, rng=None, noise=None):
        logp = ops.log_softmax(self.logits(x), axis=-1)
        onehot = np.eye(logp.shape[-1], dtype=logp.dtype)[np.asarray(y)]
        ce = -ops.sum(logp * Tensor(onehot)) / len(y)
        return ce, {"cross_entropy": float(ce.data), "total": float(ce.data)}

    def attack_loss(self, x, y, rng=None, variant=None, noise=None) -> Tensor:
        logp = ops.log_softmax(self.logits(x), axis=-1)
        onehot = np.eye(logp.shape[-1], dtype=logp.dtype)[np.asarray(y)]
        return -ops.sum(logp * Tensor(onehot))

    def predict_proba(self, x, rng=None) -> np.ndarray:
        with no_grad():
            return ops.softmax(self.logits(x), axis=-1).data

    def predict(self, x, rng=None) -> np.ndarray:
        return svgp.predict_class(self.predict_proba(x))


def model_dtype(model: Module) -> np.dtype:
    return next(iter(model.parameters())).dtype


def predict_proba_batched(model, x: np.ndarray, batch_size: int = 500, seed: int = 0) -> np.ndarray:
    """Class probabilities for a whole set; MC draws are seeded per batch, so repeated calls agree."""
    x = np.asarray(x, dtype=model_dtype(model))
    out = []
    for start in range(0, len(x), batch_size):
        out.append(model.predict_proba(x[start:start + batch_size], np.random.default_rng([seed, start])))
    return np.concatenate(out) if out else np.zeros((0, model.num_classes))


def accuracy(model, x: np.ndarray, y: np.ndarray, batch_size: int = 500, seed: int = 0) -> float:
    if len(y) == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float(np.mean(svgp.predict_class(predict_proba_batched(model, x, batch_size, seed)) == np.asarray(y)))


def build_model(kind: str, capsnet_config: CapsNetConfig, rng: np.random.Generator, *,
                recon_weight: float = 100.0, num_inducing: int = 70, mc_train: int = 10, mc_eval: int = 64,
                dataset_size: Optional[int] = None, gamma: Optional[float] = None):
    c, h, w = capsnet_config.image_shape
    if kind == "surrogate":
        return SurrogateCNN(capsnet_config.image_shape, capsnet_config.num_classes, rng)
    capsnet = CapsNet(capsnet_config, rng)
    decoder = None
    if kind in ("kcn", "capsnet"):
        decoder = Decoder(capsnet_config.feature_dim, (c, h, w), rng)
    if kind == "capsnet":
        return MarginCapsNet(capsnet, decoder, recon_weight)
    if kind in ("kcn", "kcn-gp"):
        head = svgp.SVGPHead(capsnet_config.feature_dim, capsnet_config.num_classes, num_inducing, rng, gamma=gamma)
        return KCN(capsnet, head, decoder, recon_weight, dataset_size, mc_train, mc_eval)
    raise ValueError(f"unknown model kind {kind!r}")
