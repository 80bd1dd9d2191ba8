"""Embedding model: MLP backbone plus a growable linear classifier.

The model computes features f = phi(x) and logits z = f W^T. The classifier
gains columns as new classes arrive; old columns are preserved bit-exactly.
A frozen deep copy ("snapshot") serves as the distillation teacher.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import DuplicateClass, ShapeMismatch

DTYPE = torch.float64

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ForwardResult:
    features: torch.Tensor  # (B, d)
    logits: torch.Tensor  # (B, C_seen)


class EmbeddingModel(nn.Module):
    def __init__(self, input_dim, hidden_dims, feature_dim, seed=0,
                 classifier_bias=False):
        super().__init__()
        self.input_dim = int(input_dim)
        self.hidden_dims = tuple(int(h) for h in hidden_dims)
        self.feature_dim = int(feature_dim)
        self.seed = int(seed)
        self.classifier_bias = bool(classifier_bias)
        self.classes_seen: list[int] = []

        gen = torch.Generator().manual_seed(self.seed)
        layers = []
        prev = self.input_dim
        for h in self.hidden_dims:
            layers.append(_seeded_linear(prev, h, gen))
            layers.append(nn.ReLU())
            prev = h
        layers.append(_seeded_linear(prev, self.feature_dim, gen))
        self.backbone = nn.Sequential(*layers)
        # classifier weight rows map to classes_seen order; starts empty
        self.classifier_weight = nn.Parameter(
            torch.zeros(0, self.feature_dim, dtype=DTYPE)
        )
        if self.classifier_bias:
            self.classifier_bias_param = nn.Parameter(
                torch.zeros(0, dtype=DTYPE)
            )
        self._extend_count = 0

    @property
    def num_classes_seen(self) -> int:
        return len(self.classes_seen)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() > 2:
            x = x.reshape(x.shape[0], -1)
        if x.shape[1] != self.input_dim:
            raise ShapeMismatch(
                f"input dim {x.shape[1]} != expected {self.input_dim}"
            )
        return self.backbone(x.to(DTYPE))

    def forward(self, x: torch.Tensor) -> ForwardResult:
        f = self.features(x)
        z = f @ self.classifier_weight.t()
        if self.classifier_bias:
            z = z + self.classifier_bias_param
        return ForwardResult(features=f, logits=z)

    def label_columns(self, labels) -> torch.Tensor:
        """Map global class ids to classifier column indices."""
        lookup = {c: i for i, c in enumerate(self.classes_seen)}
        return torch.tensor([lookup[int(y)] for y in labels], dtype=torch.long)

    def representation_parameters(self):
        return list(self.backbone.parameters())

    def classifier_parameters(self):
        params = [self.classifier_weight]
        if self.classifier_bias:
            params.append(self.classifier_bias_param)
        return params


def _seeded_linear(n_in, n_out, gen) -> nn.Linear:
    layer = nn.Linear(n_in, n_out, dtype=DTYPE)
    bound = 1.0 / np.sqrt(n_in)
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=gen)
        layer.bias.uniform_(-bound, bound, generator=gen)
    return layer


def reference_network(input_dim, hidden_dims, feature_dim, seed=0,
                      classifier_bias=False) -> EmbeddingModel:
    """Small deterministic MLP embedding network."""
    return EmbeddingModel(input_dim, hidden_dims, feature_dim, seed=seed,
                          classifier_bias=classifier_bias)


def extend_classifier(model: EmbeddingModel, new_class_ids) -> EmbeddingModel:
    """Grow the classifier by one column per new class.

    Existing columns stay bit-identical; new ones get seeded small-variance
    random values. Returns the same (mutated) model.
    """
    new_ids = [int(c) for c in new_class_ids]
    dup = set(new_ids) & set(model.classes_seen)
    if dup or len(set(new_ids)) != len(new_ids):
        raise DuplicateClass(f"classes already present: {sorted(dup) or new_ids}")
    if not new_ids:
        return model
    gen = torch.Generator().manual_seed(model.seed * 9973 + model._extend_count)
    fresh = torch.empty(len(new_ids), model.feature_dim, dtype=DTYPE)
    fresh.normal_(0.0, 0.01, generator=gen)
    with torch.no_grad():
        model.classifier_weight = nn.Parameter(
            torch.cat([model.classifier_weight.data, fresh])
        )
        if model.classifier_bias:
            model.classifier_bias_param = nn.Parameter(
                torch.cat(
                    [model.classifier_bias_param.data,
                     torch.zeros(len(new_ids), dtype=DTYPE)]
                )
            )
    model.classes_seen = model.classes_seen + new_ids
    model._extend_count += 1
    return model


class ModelSnapshot:
    """Frozen deep copy of a model; forward passes request no gradients."""

    def __init__(self, model: EmbeddingModel):
        self._model = copy.deepcopy(model)
        self._model.eval()
        for p in self._model.parameters():
            p.requires_grad_(False)

    @property
    def classes_seen(self):
        return list(self._model.classes_seen)

    @property
    def feature_dim(self):
        return self._model.feature_dim

    def forward(self, x: torch.Tensor) -> ForwardResult:
        with torch.no_grad():
            return self._model(x)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self._model.features(x)

    def label_columns(self, labels):
        return self._model.label_columns(labels)

    def parameter_checksum(self) -> bytes:
        import hashlib

        h = hashlib.sha256()
        for p in self._model.parameters():
            h.update(p.detach().numpy().tobytes())
        return h.digest()


def snapshot(model: EmbeddingModel) -> ModelSnapshot:
    return ModelSnapshot(model)


def parameter_checksum(model: EmbeddingModel) -> bytes:
    import hashlib

    h = hashlib.sha256()
    for p in model.parameters():
        h.update(p.detach().numpy().tobytes())
    return h.digest()


def save_checkpoint(model: EmbeddingModel, path: str):
    torch.save(
        {
            "version": CHECKPOINT_VERSION,
            "input_dim": model.input_dim,
            "hidden_dims": model.hidden_dims,
            "feature_dim": model.feature_dim,
            "seed": model.seed,
            "classifier_bias": model.classifier_bias,
            "classes_seen": model.classes_seen,
            "extend_count": model._extend_count,
            "state_dict": model.state_dict(),
        },
        path,
    )


def load_checkpoint(path: str) -> EmbeddingModel:
    blob = torch.load(path, weights_only=False)
    if blob["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {blob['version']}")
    model = EmbeddingModel(
        blob["input_dim"], blob["hidden_dims"], blob["feature_dim"],
        seed=blob["seed"], classifier_bias=blob["classifier_bias"],
    )
    n = len(blob["classes_seen"])
    model.classifier_weight = nn.Parameter(
        torch.zeros(n, model.feature_dim, dtype=DTYPE)
    )
    if model.classifier_bias:
        model.classifier_bias_param = nn.Parameter(torch.zeros(n, dtype=DTYPE))
    model.load_state_dict(blob["state_dict"])
    model.classes_seen = list(blob["classes_seen"])
    model._extend_count = blob["extend_count"]
    return model
