"""Reference features for S^sim: a small supervised ViT trained on corpus labels,
or an externally supplied dump in the checkpoint container format."""
from __future__ import annotations

import dataclasses

import numpy as np

from .. import checkpoint
from .. import diffcore as dc
from ..analysis import ReferenceFeatures
from ..nn import Linear, Module
from ..vit import Encoder, ModelConfig, patchify
from .data import ImageDataset
from .optim import AdamW


class Classifier(Module):
    def __init__(self, cfg: ModelConfig, n_classes: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.encoder = Encoder(cfg, rng)
        self.head = Linear(cfg.enc_dim, n_classes, rng, np.dtype(cfg.dtype))

    def features(self, x) -> dc.Tensor:
        """Patch tokens (B, n, d) of the last encoder layer, whole image visible."""
        mask = np.zeros((x.shape[0], self.cfg.n), dtype=bool)
        z, _, _ = self.encoder(x, mask)
        return z[:, 1:, :] if self.cfg.use_cls else z

    def forward(self, x) -> dc.Tensor:
        return self.head(self.features(x).mean(axis=1))


def train_classifier(ds: ImageDataset, cfg: ModelConfig, steps: int = 300, batch: int = 32,
                     lr: float = 1e-3, seed: int = 0) -> tuple[Classifier, float]:
    """Returns the classifier and its final training-set accuracy."""
    cfg = dataclasses.replace(cfg, decoder="transformer", ae_block=None)
    n_classes = int(ds.labels.max()) + 1
    model = Classifier(cfg, n_classes, seed)
    opt = AdamW(model.named_parameters(), lr=lr)
    for step, idx in enumerate(ds.batches(batch, seed, steps)):
        x = patchify(ds.images[idx], cfg.patch)
        y = ds.labels[idx].astype(np.int64)
        opt.zero_grad()
        logp = dc.log_softmax(model(x), axis=-1)
        loss = -logp[np.arange(len(y)), y].mean()
        loss.backward()
        opt.step(lr * min(1.0, (step + 1) / 50))
    with dc.no_grad():
        pred = np.concatenate([
            model(patchify(ds.images[s:s + 128], cfg.patch)).data.argmax(-1) for s in range(0, len(ds), 128)
        ])
    return model, float(np.mean(pred == ds.labels))


def classifier_features(model: Classifier, images: np.ndarray, provenance: str) -> ReferenceFeatures:
    with dc.no_grad():
        f = model.features(patchify(images, model.cfg.patch)).data
    return ReferenceFeatures(f.astype(np.float64), provenance)


def save_reference(path, ref: ReferenceFeatures) -> None:
    checkpoint.save(path, {
        "features": np.asarray(ref.features, dtype=np.float64),
        "provenance": np.frombuffer(ref.provenance.encode("utf-8"), dtype=np.uint8),
    })


def load_reference(path) -> ReferenceFeatures:
    arrays = checkpoint.load(path)
    if "features" not in arrays:
        raise checkpoint.CheckpointError(f"{path}: no 'features' entry")
    prov = bytes(arrays.get("provenance", np.zeros(0, np.uint8))).decode("utf-8") or f"file:{path}"
    feats = arrays["features"]
    if feats.ndim != 3:
        raise checkpoint.CheckpointError(f"{path}: features must be (images, n, d), got {feats.shape}")
    return ReferenceFeatures(feats, prov)
