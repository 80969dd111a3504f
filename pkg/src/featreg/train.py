"""Two-phase weakly supervised training driven by pose-tagged scan pairs.

Phase 1 pretrains the descriptor alone: clusters unrotated, uniform attention,
detector untouched. Phase 2 trains the full network with orientation and
attention in the loop and full in-plane rotation augmentation switched on.
Supervision comes entirely from cloud-level proximity: positives overlap the
anchor (centroids within tau_p), negatives are far away (beyond tau_n).
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import geom
from .errors import ConfigurationError, InvalidInputError, TrainingDivergedError
from .geom import AugmentParams, PointCloud, RigidTransform
from .loss import BranchOutput, TripletLossConfig, triplet_loss
from .net import ModelWeights, NetConfig, branch_graph

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PoseTaggedCloud:
    """A scan in its own local frame plus the pose mapping it into the world."""

    cloud: PointCloud
    pose: RigidTransform
    traversal_id: str = ""


@dataclass(frozen=True)
class TrainConfig:
    """Everything the trainer needs, expressible as a flat key=value file.

    Distances in meters. K clusters per branch; clouds are cropped to crop_R
    around their centroid and randomly downsampled to dropout_n points before
    each forward pass.
    """

    tau_p: float = 5.0
    tau_n: float = 50.0
    batch_triplets: int = 6
    lr: float = 1e-5
    k: int = 512
    r_cluster: float = 2.0
    crop_r: float = 20.0
    dropout_n: int = 4096
    pretrain_epochs: int = 2
    main_epochs: int = 10
    seed: int = 0
    margin: float = 0.2
    descriptor_dim: int = 32
    context_dim: int = 128
    cluster_cap: int = 64
    jitter_sigma: float = 0.01
    jitter_clip: float = 0.05
    shift_range: float = 2.0
    small_rot_max_deg: float = 2.0
    point_mlp: str = "64,128,256"
    post_mlp: str = "128,64"

    def __post_init__(self):
        if not (0 < self.tau_p < self.tau_n):
            raise ConfigurationError("need 0 < tau_p < tau_n")
        if self.batch_triplets < 1 or self.k < 1 or self.dropout_n < 1:
            raise ConfigurationError("batch_triplets, k, dropout_n must be >= 1")
        if self.pretrain_epochs < 0 or self.main_epochs < 0:
            raise ConfigurationError("epoch counts must be >= 0")
        if not (self.lr > 0 and self.r_cluster > 0 and self.crop_r > 0):
            raise ConfigurationError("lr, r_cluster, crop_r must be positive")

    def net_config(self) -> NetConfig:
        return NetConfig(
            point_mlp=_parse_widths(self.point_mlp),
            post_mlp=_parse_widths(self.post_mlp),
            context_dim=self.context_dim,
            descriptor_dim=self.descriptor_dim,
        )

    def augment_params(self, z_rot: bool) -> AugmentParams:
        return AugmentParams(
            jitter_sigma=self.jitter_sigma,
            jitter_clip=self.jitter_clip,
            shift_range=self.shift_range,
            small_rot_max=float(np.deg2rad(self.small_rot_max_deg)),
            z_rot=z_rot,
        )


def _parse_widths(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in str(text).split(",") if part.strip())
    except ValueError as exc:
        raise ConfigurationError(f"bad layer width list {text!r}") from exc


def parse_config(text: str) -> TrainConfig:
    """Parse flat key=value lines (# comments, blank lines allowed)."""
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in fields:
            raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
        ftype = fields[key].type
        try:
            if ftype == "int":
                values[key] = int(val)
            elif ftype == "float":
                values[key] = float(val)
            else:
                values[key] = val
        except ValueError as exc:
            raise ConfigurationError(f"line {lineno}: bad value for {key}: {val!r}") from exc
    return TrainConfig(**values)


def format_config(cfg: TrainConfig) -> str:
    lines = [f"{f.name}={getattr(cfg, f.name)}" for f in dataclasses.fields(TrainConfig)]
    return "\n".join(lines) + "\n"


def _world_centroids(dataset: list[PoseTaggedCloud]) -> np.ndarray:
    out = np.empty((len(dataset), 3))
    for i, ptc in enumerate(dataset):
        local = ptc.cloud.points.mean(axis=0)
        out[i] = ptc.pose.rotation @ local + ptc.pose.translation
    return out


def build_triplets(
    dataset: list[PoseTaggedCloud], cfg: TrainConfig, rng: np.random.Generator
) -> list[tuple[int, int, int]]:
    """One (anchor, positive, negative) index triple per usable anchor.

    Positives lie within tau_p of the anchor's world centroid, negatives
    beyond tau_n, both drawn uniformly. Anchors missing either side are
    skipped with a logged count; no usable anchor at all is a config error.
    """
    if any(len(ptc.cloud) == 0 for ptc in dataset):
        raise InvalidInputError("dataset contains an empty cloud")
    cents = _world_centroids(dataset)
    diff = cents[:, None, :] - cents[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))
    triplets = []
    skipped = 0
    for i in range(len(dataset)):
        pos_pool = np.nonzero((dist[i] < cfg.tau_p) & (np.arange(len(dataset)) != i))[0]
        neg_pool = np.nonzero(dist[i] > cfg.tau_n)[0]
        if len(pos_pool) == 0 or len(neg_pool) == 0:
            skipped += 1
            continue
        triplets.append((i, int(rng.choice(pos_pool)), int(rng.choice(neg_pool))))
    if skipped:
        log.info("build_triplets: skipped %d of %d anchors", skipped, len(dataset))
    if not triplets:
        raise ConfigurationError(
            f"no valid triplets: every one of {len(dataset)} anchors lacks a "
            f"positive (<{cfg.tau_p}m) or negative (>{cfg.tau_n}m)"
        )
    return triplets


def _prepare_branch(
    ptc: PoseTaggedCloud, cfg: TrainConfig, aug: AugmentParams, rng: np.random.Generator
) -> PointCloud:
    cloud = ptc.cloud
    centroid = cloud.points.mean(axis=0)
    cropped = geom.crop_ball(cloud, centroid, cfg.crop_r)
    if len(cropped) == 0:  # centroid outside all points is impossible, but stay safe
        cropped = cloud
    dropped = geom.random_point_dropout(cropped, cfg.dropout_n, rng)
    augmented, _ = geom.augment(dropped, aug, rng)
    return augmented


def _branch_output(
    cloud: PointCloud, weights: ModelWeights, cfg: TrainConfig, seed: int, use_detector: bool
) -> BranchOutput:
    desc, attn = branch_graph(
        cloud,
        weights,
        cfg.k,
        r_cluster=cfg.r_cluster,
        seed=seed,
        cap=cfg.cluster_cap,
        use_detector=use_detector,
    )
    if attn is None:
        attn = ad.Tensor(np.ones(desc.data.shape[0]))
    return BranchOutput(descriptors=desc, attentions=attn)


def train(
    dataset: list[PoseTaggedCloud],
    cfg: TrainConfig,
    weights: ModelWeights | None = None,
    checkpoint_every: int = 0,
    checkpoint_path=None,
) -> tuple[ModelWeights, list[tuple[int, int, float]]]:
    """Run both phases; returns the weights and a (step, phase, loss) history.

    The batch of batch_triplets triplets is processed as independent graphs
    whose gradients are averaged for one Adam step. A non-finite loss aborts
    with TrainingDivergedError. checkpoint_every > 0 writes the weights to
    '<checkpoint_path>.step<N>' at that step cadence.
    """
    rng = np.random.default_rng(cfg.seed)
    if weights is None:
        weights = ModelWeights.initialize(cfg.net_config(), seed=rng)
    loss_cfg = TripletLossConfig(margin=cfg.margin)
    history: list[tuple[int, int, float]] = []
    step = 0

    phases = (
        (1, cfg.pretrain_epochs, False, weights.descriptor_parameters()),
        (2, cfg.main_epochs, True, weights.parameters()),
    )
    for phase, epochs, use_detector, trainable in phases:
        if epochs == 0:
            continue
        state = ad.AdamState(lr=cfg.lr)
        aug = cfg.augment_params(z_rot=use_detector)
        for epoch in range(epochs):
            triplets = build_triplets(dataset, cfg, rng)
            order = rng.permutation(len(triplets))
            for lo in range(0, len(order), cfg.batch_triplets):
                batch = [triplets[j] for j in order[lo : lo + cfg.batch_triplets]]
                ad.zero_grads(trainable)
                batch_losses = []
                for (ia, ip, ineg) in batch:
                    branches = []
                    for idx in (ia, ip, ineg):
                        cloud = _prepare_branch(dataset[idx], cfg, aug, rng)
                        seed = int(rng.integers(2**63 - 1))
                        branches.append(_branch_output(cloud, weights, cfg, seed, use_detector))
                    loss = triplet_loss(*branches, loss_cfg)
                    value = float(loss.data)
                    if not np.isfinite(value):
                        raise TrainingDivergedError(
                            f"non-finite loss at step {step} (phase {phase}, epoch {epoch})"
                        )
                    ad.backward(loss, params=trainable)
                    batch_losses.append(value)
                inv = 1.0 / len(batch)
                grads = {name: p.grad * inv for name, p in trainable.items()}
                ad.adam_step(trainable, grads, state)
                history.append((step, phase, float(np.mean(batch_losses))))
                step += 1
                if checkpoint_every > 0 and checkpoint_path is not None and step % checkpoint_every == 0:
                    weights.save(f"{checkpoint_path}.step{step}")
            log.info(
                "phase %d epoch %d/%d: mean loss %.4f",
                phase,
                epoch + 1,
                epochs,
                float(np.mean([h[2] for h in history[-max(1, len(triplets) // cfg.batch_triplets):]])),
            )
    return weights, history


def save_loss_history(path, history: list[tuple[int, int, float]]) -> None:
    """Write the per-step loss curve as step,phase,loss CSV."""
    with open(path, "w") as fh:
        fh.write("step,phase,loss\n")
        for step, phase, value in history:
            fh.write(f"{step},{phase},{value!r}\n")
