"""Estimator-style front end to the enhancement network.

``PoiEnhancer`` follows scikit-learn conventions: constructor stores
hyperparameters verbatim, ``fit`` learns state into trailing-underscore
attributes, ``transform`` maps inputs to fused embeddings, and
``get_params``/``set_params`` come from ``BaseEstimator`` so the object
composes with model selection utilities.

Inputs are matrix-level. Both ``fit`` and ``transform`` take a mapping with
keys ``visit``, ``address``, ``surrounding`` (the three language-model feature
matrices, one row per POI) and ``base`` (the base embedding matrix with the
same row order). ``fit`` additionally needs ``batch_rows``: the contrastive
batches as row-index arrays (anchor, positive, negatives), usually produced by
``sampling.build_batches`` and mapped to row indices by the caller.
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .errors import UserError
from .model import EnhancerNet, HyperParams
from .training import infonce_loss, similarity_loss
from .validation import check_batch_rows, check_feature_block


class PoiEnhancer(BaseEstimator, TransformerMixin):
    """Learn to fuse language-model POI features into base embeddings."""

    def __init__(
        self,
        dim: int | None = None,
        latent_dim: int | None = None,
        heads: int = 8,
        head_dim: int = 32,
        align_layers: int = 4,
        fuse_layers: int = 2,
        ffn_mult: int = 4,
        parallel_fuse: bool = False,
        scale_by_head_dim: bool = False,
        epochs: int = 100,
        lr: float = 1e-3,
        weight_decay: float = 1e-3,
        temperature: float = 0.1,
        chunk_size: int = 1024,
        seed: int = 0,
    ):
        self.dim = dim
        self.latent_dim = latent_dim
        self.heads = heads
        self.head_dim = head_dim
        self.align_layers = align_layers
        self.fuse_layers = fuse_layers
        self.ffn_mult = ffn_mult
        self.parallel_fuse = parallel_fuse
        self.scale_by_head_dim = scale_by_head_dim
        self.epochs = epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.temperature = temperature
        self.chunk_size = chunk_size
        self.seed = seed

    def _hyperparams(self, feature_dim: int, base_dim: int) -> HyperParams:
        dim = self.dim if self.dim is not None else base_dim
        if dim != base_dim:
            raise UserError(
                f"dim={dim} must match the base embedding width {base_dim}"
            )
        latent = self.latent_dim if self.latent_dim is not None else dim
        return HyperParams(
            dim=dim,
            latent_dim=latent,
            heads=self.heads,
            head_dim=self.head_dim,
            align_layers=self.align_layers,
            fuse_layers=self.fuse_layers,
            feature_dim=feature_dim,
            ffn_mult=self.ffn_mult,
            parallel_fuse=self.parallel_fuse,
            scale_by_head_dim=self.scale_by_head_dim,
        )

    def fit(self, X, y=None, batch_rows=None):
        """Train the network on contrastive batches.

        ``X``: mapping with visit/address/surrounding/base matrices.
        ``batch_rows``: list of 1-D integer arrays indexing rows of those
        matrices; row 0 is the anchor, row 1 its positive.
        """
        if batch_rows is None:
            raise UserError("fit requires batch_rows (contrastive batches)")
        visit, address, surrounding, base = check_feature_block(X)
        batches = check_batch_rows(batch_rows, n_rows=visit.shape[0])
        if self.epochs < 1:
            raise UserError("epochs must be >= 1")
        hp = self._hyperparams(visit.shape[1], base.shape[1])
        torch.manual_seed(self.seed)
        model = EnhancerNet(hp, seed=self.seed)
        optimizer = torch.optim.AdamW(
            model.parameters(), lr=self.lr, weight_decay=self.weight_decay
        )
        tv = torch.from_numpy(visit)
        ta = torch.from_numpy(address)
        ts = torch.from_numpy(surrounding)
        tb = torch.from_numpy(base)
        history = []
        for epoch in range(self.epochs):
            order = np.random.default_rng([self.seed, epoch]).permutation(len(batches))
            total = 0.0
            model.train()
            for bi in order:
                rows = torch.from_numpy(batches[bi])
                fused = model(tv[rows], ta[rows], ts[rows], tb[rows])
                loss = infonce_loss(fused, self.temperature) + similarity_loss(
                    fused, tb[rows]
                )
                if not torch.isfinite(loss):
                    raise FloatingPointError(f"non-finite loss at epoch {epoch}")
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                total += float(loss.detach())
            history.append(total / len(batches))
        self.model_ = model
        self.history_ = history
        self.n_features_in_ = visit.shape[1]
        self.base_dim_ = base.shape[1]
        return self

    def transform(self, X):
        """Fuse features into base embeddings; returns a float32 matrix.

        Attention mixes rows within a chunk, so ``chunk_size`` is part of the
        transform's definition, not just a performance knob.
        """
        check_is_fitted(self, "model_")
        visit, address, surrounding, base = check_feature_block(X)
        if visit.shape[1] != self.n_features_in_:
            raise UserError(
                f"feature width {visit.shape[1]} != fitted width {self.n_features_in_}"
            )
        if base.shape[1] != self.base_dim_:
            raise UserError(
                f"base width {base.shape[1]} != fitted width {self.base_dim_}"
            )
        if self.chunk_size < 1:
            raise UserError("chunk_size must be >= 1")
        model = self.model_
        model.eval()
        out = []
        with torch.no_grad():
            for start in range(0, visit.shape[0], self.chunk_size):
                sl = slice(start, start + self.chunk_size)
                fused = model(
                    torch.from_numpy(visit[sl]),
                    torch.from_numpy(address[sl]),
                    torch.from_numpy(surrounding[sl]),
                    torch.from_numpy(base[sl]),
                )
                out.append(fused.numpy().astype(np.float32, copy=False))
        if not out:
            return np.zeros((0, self.base_dim_), dtype=np.float32)
        return np.concatenate(out, axis=0)
