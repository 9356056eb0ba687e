"""End-to-end estimator: preprocessing, three training stages and MAP-EM thresholding."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import config as cfgmod
from .data import Preprocessor, SpatialDataset, concat_datasets, zero_proportion_mean
from .graph import build_knn_graph
from .nn import CheckpointError, load_checkpoint, save_checkpoint
from .stage1 import PatchAutoencoder, pretrain_stage1
from .stage2 import Mgdat, MgdatTrainer, Stage2Inputs
from .stage3 import OccNet, OccTrainer, adaptive_beta
from .threshold import MapEmThreshold

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class VariantSpec:
    mask: bool = True
    fusion: str = "bottleneck"
    zero_image: bool = False
    zero_genes: bool = False
    alpha: float | None = None
    beta: float | None = None
    occ_target: str = "rec"
    score: str = "occ"

    def stage2_key(self) -> tuple:
        return (self.mask, self.fusion, self.zero_image, self.zero_genes, self.alpha)


VARIANTS: dict[str, VariantSpec] = {
    "full": VariantSpec(),
    "st_only": VariantSpec(zero_image=True, alpha=0.0, beta=0.0),
    "image_only": VariantSpec(zero_genes=True, alpha=1.0, beta=1.0),
    "no_mgdat": VariantSpec(fusion="concat"),
    "no_tnm": VariantSpec(mask=False),
    "no_re": VariantSpec(occ_target="embedding"),
    "no_oc": VariantSpec(score="recon"),
}


@dataclass
class Inference:
    """Per-spot outputs of one scoring pass."""

    scores: np.ndarray
    latent_errors: np.ndarray | None
    recon_loss: np.ndarray
    patches_rec: np.ndarray
    expr_rec: np.ndarray


def check_dataset(d) -> SpatialDataset:
    if not isinstance(d, SpatialDataset):
        raise TypeError(f"expected a SpatialDataset, got {type(d).__name__}")
    if d.patches.shape[1] != d.patches.shape[2]:
        raise ValueError("patches must be square")
    return d


class MEATRD(BaseEstimator):
    """Multimodal anomaly detector for spatial transcriptomics spots.

    Hyperparameter names mirror the dotted configuration keys with dots
    replaced by underscores (``loss.alpha`` -> ``loss_alpha``).

    Examples
    --------
    >>> model = MEATRD(stage1_epochs=1, stage2_epochs=1, stage3_epochs=1)  # doctest: +SKIP
    >>> model.fit(reference).score_samples(target)                         # doctest: +SKIP
    """

    def __init__(self, seed=0, ablation="full", graph_k=6, preprocess_min_spots=10, preprocess_n_hvg=3000,
                 preprocess_hvg_mode="pooled", model_embed_dim=256, mgdat_blocks=3, mgdat_heads=2,
                 mgdat_bottleneck_dim=16, mgdat_trm_layers=2, mgdat_trm_heads=4, mgdat_d2_stages=3,
                 mgdat_hops=3, mgdat_exact_subgraph=False, mgdat_finetune_e1=False, loss_alpha=0.5,
                 loss_gamma=2.0, occ_beta=0.5, occ_adaptive_beta=False, occ_dim=256,
                 occ_recompute_center=True, stage1_epochs=30, stage1_batch=128, stage1_lr=1e-4,
                 stage2_epochs=10, stage2_batch=128, stage2_lr=1e-4, stage3_epochs=5, stage3_batch=128,
                 stage3_lr=1e-4, em_max_iter=200, em_tol=1e-6, em_a=1.0, em_b=10.0, em_kappa0=0.01,
                 em_nu0=3.0, em_variance_form="normalized"):
        self.seed = seed
        self.ablation = ablation
        self.graph_k = graph_k
        self.preprocess_min_spots = preprocess_min_spots
        self.preprocess_n_hvg = preprocess_n_hvg
        self.preprocess_hvg_mode = preprocess_hvg_mode
        self.model_embed_dim = model_embed_dim
        self.mgdat_blocks = mgdat_blocks
        self.mgdat_heads = mgdat_heads
        self.mgdat_bottleneck_dim = mgdat_bottleneck_dim
        self.mgdat_trm_layers = mgdat_trm_layers
        self.mgdat_trm_heads = mgdat_trm_heads
        self.mgdat_d2_stages = mgdat_d2_stages
        self.mgdat_hops = mgdat_hops
        self.mgdat_exact_subgraph = mgdat_exact_subgraph
        self.mgdat_finetune_e1 = mgdat_finetune_e1
        self.loss_alpha = loss_alpha
        self.loss_gamma = loss_gamma
        self.occ_beta = occ_beta
        self.occ_adaptive_beta = occ_adaptive_beta
        self.occ_dim = occ_dim
        self.occ_recompute_center = occ_recompute_center
        self.stage1_epochs = stage1_epochs
        self.stage1_batch = stage1_batch
        self.stage1_lr = stage1_lr
        self.stage2_epochs = stage2_epochs
        self.stage2_batch = stage2_batch
        self.stage2_lr = stage2_lr
        self.stage3_epochs = stage3_epochs
        self.stage3_batch = stage3_batch
        self.stage3_lr = stage3_lr
        self.em_max_iter = em_max_iter
        self.em_tol = em_tol
        self.em_a = em_a
        self.em_b = em_b
        self.em_kappa0 = em_kappa0
        self.em_nu0 = em_nu0
        self.em_variance_form = em_variance_form

    # -- helpers -------------------------------------------------------------
    @classmethod
    def from_config(cls, cfg: dict) -> "MEATRD":
        return cls(**cfgmod.to_params(cfgmod.validate(cfg)))

    def config(self) -> dict:
        return cfgmod.from_params(self.get_params())

    @property
    def variant(self) -> VariantSpec:
        if self.ablation not in VARIANTS:
            raise ValueError(f"unknown ablation {self.ablation!r}")
        return VARIANTS[self.ablation]

    def _alpha(self) -> float:
        v = self.variant
        return self.loss_alpha if v.alpha is None else v.alpha

    def _seed(self, stage: str) -> int:
        return cfgmod.stage_seed(self.seed, stage)

    def _image_attrs(self, patches: np.ndarray) -> np.ndarray:
        if self.variant.zero_image:
            return np.zeros((len(patches), self.model_embed_dim))
        return self.encoder_.encode(patches)

    def _inputs(self, d: SpatialDataset, graph) -> tuple[Stage2Inputs, np.ndarray]:
        """Stage II inputs (with modality surgery) and the expression used by Stage III."""
        expr = np.zeros_like(d.expr) if self.variant.zero_genes else d.expr
        s2 = Stage2Inputs(z=self._image_attrs(d.patches), expr=expr, patches=d.patches, graph=graph)
        return s2, expr

    def _trainer(self) -> MgdatTrainer:
        v = self.variant
        return MgdatTrainer(self.stage2_, alpha=self._alpha(), gamma=self.loss_gamma,
                            mode="exact" if self.mgdat_exact_subgraph else "batched", mask=v.mask,
                            hops=self.mgdat_hops, encoder=getattr(self, "encoder_", None),
                            finetune_e1=self.mgdat_finetune_e1)

    def _new_stage2(self, n_genes: int, patches: np.ndarray) -> Mgdat:
        return Mgdat(n_genes, embed_dim=self.model_embed_dim, bottleneck_dim=self.mgdat_bottleneck_dim,
                     blocks=self.mgdat_blocks, gat_heads=self.mgdat_heads, trm_layers=self.mgdat_trm_layers,
                     trm_heads=self.mgdat_trm_heads, d2_stages=self.mgdat_d2_stages,
                     patch_size=patches.shape[1], channels=patches.shape[3], fusion=self.variant.fusion,
                     seed=self._seed("stage2"))

    def _new_stage3(self, n_genes: int, patches: np.ndarray) -> OccNet:
        return OccNet(n_genes, embed_dim=self.model_embed_dim, occ_dim=self.occ_dim, channels=patches.shape[3],
                      patch_size=patches.shape[1], seed=self._seed("stage3"))

    def _occ(self) -> OccTrainer:
        return OccTrainer(self.stage3_, beta=self.beta_, target=self.variant.occ_target,
                          recompute_center=self.occ_recompute_center)

    # -- fitting -------------------------------------------------------------
    def fit(self, X, y=None, stage1: PatchAutoencoder | None = None, stage2: Mgdat | None = None):
        """Train on inlier reference data (one dataset or a list pooled together).

        ``stage1``/``stage2`` reuse already trained modules (used when several
        ablation variants share them).
        """
        refs = [check_dataset(d) for d in (X if isinstance(X, (list, tuple)) else [X])]
        if not refs:
            raise ValueError("no reference data")
        v = self.variant
        self.preprocessor_ = Preprocessor(self.preprocess_min_spots, self.preprocess_n_hvg,
                                          self.preprocess_hvg_mode).fit(refs)
        ref = concat_datasets(self.preprocessor_.transform(refs))
        raw = concat_datasets(refs)
        self.n_genes_ = ref.n_genes
        self.zero_proportion_ = zero_proportion_mean(raw)
        beta = adaptive_beta(self.zero_proportion_) if self.occ_adaptive_beta else self.occ_beta
        self.beta_ = beta if v.beta is None else v.beta
        graph = build_knn_graph(ref.coords, self.graph_k)
        self.history_ = {}

        if stage1 is not None:
            self.encoder_ = stage1
        else:
            self.encoder_, self.history_["stage1"] = pretrain_stage1(
                ref.patches, epochs=self.stage1_epochs, batch_size=self.stage1_batch, lr=self.stage1_lr,
                embed_dim=self.model_embed_dim, seed=self._seed("stage1"))

        data, expr = self._inputs(ref, graph)
        if stage2 is not None:
            self.stage2_ = stage2
        else:
            self.stage2_ = self._new_stage2(ref.n_genes, ref.patches)
            self.history_["stage2"] = self._trainer().fit(
                data, epochs=self.stage2_epochs, batch_size=self.stage2_batch, lr=self.stage2_lr,
                seed=self._seed("stage2"))
            if self.mgdat_finetune_e1:
                data, expr = self._inputs(ref, graph)
        self.mask_rate_ = min(1.0, self.stage2_batch / ref.n_spots)
        P_t, x_t, losses = self._trainer().reconstruct(data, self._recon_batch(ref.n_spots), self._seed("stage2"))

        if v.score == "occ":
            self.stage3_ = self._new_stage3(ref.n_genes, ref.patches)
            occ = self._occ()
            self.history_["stage3"] = occ.fit(ref.patches, expr, P_t, x_t, epochs=self.stage3_epochs,
                                              batch_size=self.stage3_batch, lr=self.stage3_lr,
                                              seed=self._seed("stage3"))
            self.center_ = occ.center
            self.reference_scores_ = occ.score(ref.patches, expr, P_t, x_t)
        else:
            self.stage3_ = None
            self.center_ = None
            self.reference_scores_ = losses["total"]
        return self

    # -- inference -----------------------------------------------------------
    def _recon_batch(self, n: int) -> int:
        """Targets per reconstruction batch, keeping the training masking density."""
        return max(self.stage2_batch, int(np.ceil(n * self.mask_rate_)))

    def infer(self, X) -> Inference:
        """Reconstruct and score every spot of a target dataset."""
        check_is_fitted(self, "stage2_")
        d = self.preprocessor_.transform(check_dataset(X))
        graph = build_knn_graph(d.coords, self.graph_k)
        data, expr = self._inputs(d, graph)
        P_t, x_t, losses = self._trainer().reconstruct(data, self._recon_batch(d.n_spots), self._seed("stage2"))
        if self.variant.score == "occ":
            occ = self._occ()
            occ.center = self.center_
            errs = occ.errors(d.patches, expr, P_t, x_t)
            scores = np.sum((errs - self.center_) ** 2, axis=1)
        else:
            errs, scores = None, losses["total"].copy()
        return Inference(scores=scores, latent_errors=errs, recon_loss=losses["total"],
                         patches_rec=P_t, expr_rec=x_t)

    def score_samples(self, X) -> np.ndarray:
        """Anomaly scores (larger is more anomalous)."""
        return self.infer(X).scores

    def threshold(self, scores) -> MapEmThreshold:
        check_is_fitted(self, "reference_scores_")
        return MapEmThreshold(kappa0=self.em_kappa0, nu0=self.em_nu0, a=self.em_a, b=self.em_b,
                              max_iter=self.em_max_iter, tol=self.em_tol,
                              variance_form=self.em_variance_form).fit(scores, self.reference_scores_)

    def predict(self, X) -> np.ndarray:
        """Hard anomaly calls (1 = anomalous) from the MAP-EM mixture threshold."""
        scores = self.score_samples(X)
        return self.threshold(scores).predict(scores)

    # -- persistence ---------------------------------------------------------
    def save(self, out_dir, stages=("stage1", "stage2", "stage3")) -> dict[str, str]:
        """Write MPRM checkpoints plus ``model.json``; returns the written paths."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {}
        if "stage1" in stages:
            paths["stage1"] = str(out / "stage1.mprm")
            save_checkpoint(paths["stage1"], self.encoder_.state_dict(),
                            {"embed_dim": self.encoder_.embed_dim, "patch_size": self.encoder_.patch_size,
                             "in_channels": self.encoder_.in_channels})
        if "stage2" in stages and hasattr(self, "stage2_"):
            paths["stage2"] = str(out / "stage2.mprm")
            save_checkpoint(paths["stage2"], self.stage2_.state_dict(), {"n_genes": self.n_genes_})
            if self.stage3_ is not None:
                paths["stage3"] = str(out / "stage3.mprm")
                save_checkpoint(paths["stage3"], self.stage3_.state_dict(),
                                {"center": self.center_, "n_genes": self.n_genes_})
            np.save(out / "reference_scores.npy", self.reference_scores_)
            paths["reference_scores"] = str(out / "reference_scores.npy")
            meta = {
                "mask_rate": self.mask_rate_,
                "config": self.config(),
                "beta": self.beta_,
                "zero_proportion": self.zero_proportion_,
                "filtered_genes": list(self.preprocessor_.filtered_genes_),
                "hvg_genes": list(self.preprocessor_.hvg_genes_),
            }
            paths["model"] = str(out / "model.json")
            Path(paths["model"]).write_text(json.dumps(meta, indent=2), encoding="utf-8")
        return paths

    @classmethod
    def load_encoder(cls, path) -> PatchAutoencoder:
        state, meta = load_checkpoint(path)
        enc = PatchAutoencoder(embed_dim=int(meta["embed_dim"]), in_channels=int(meta["in_channels"]),
                               patch_size=int(meta["patch_size"]))
        enc.load_state_dict(state)
        return enc

    @classmethod
    def load(cls, model_dir) -> "MEATRD":
        d = Path(model_dir)
        try:
            meta = json.loads((d / "model.json").read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise CheckpointError(f"{d}: no trained model (model.json missing)") from exc
        model = cls.from_config(meta["config"])
        model.encoder_ = cls.load_encoder(d / "stage1.mprm")
        pre = Preprocessor(model.preprocess_min_spots, model.preprocess_n_hvg, model.preprocess_hvg_mode)
        pre.filtered_genes_ = tuple(meta["filtered_genes"])
        pre.hvg_genes_ = tuple(meta["hvg_genes"])
        model.preprocessor_ = pre
        model.n_genes_ = len(pre.hvg_genes_)
        model.beta_ = float(meta["beta"])
        model.zero_proportion_ = float(meta["zero_proportion"])
        model.mask_rate_ = float(meta["mask_rate"])
        p = model.encoder_.patch_size
        dummy = np.zeros((1, p, p, model.encoder_.in_channels))
        model.stage2_ = model._new_stage2(model.n_genes_, dummy)
        state, _ = load_checkpoint(d / "stage2.mprm")
        model.stage2_.load_state_dict(state)
        if model.variant.score == "occ":
            model.stage3_ = model._new_stage3(model.n_genes_, dummy)
            state, m3 = load_checkpoint(d / "stage3.mprm")
            model.stage3_.load_state_dict(state)
            model.center_ = m3["center"]
        else:
            model.stage3_, model.center_ = None, None
        model.reference_scores_ = np.load(d / "reference_scores.npy")
        return model
