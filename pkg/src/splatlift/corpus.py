"""Paired (input, target) corpora built from synthetic occlusion scenes.

Every scene contributes one input view, the trajectory's reference camera, and
target views at camera-index offsets from it. Training masks come from the
exact ray-cast depths pushed through the same soft reprojection formula used
for Gaussian-derived masks; evaluation masks are the binary geometric oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datagen import QuadScene, TrajectoryConfig, gen_scene, oracle_visibility, raycast_render, trajectory_camera
from .training import TrainSample
from .visibility import depth_visibility_mask

HOLDOUT_OFFSETS = (-10, -5, 5, 10)
BUCKETS = ("input", "+5", "+10", "uniform")


@dataclass
class CorpusConfig:
    n_scenes: int = 10
    resolution: int = 96
    kind: str = "wall+occluder"
    seed: int = 0
    max_offset: int = 10
    step: float = 0.1
    uniform_per_scene: int = 4
    window: float = 15.0  # uniform bucket draws offsets in [-window, window]

    def trajectory(self) -> TrajectoryConfig:
        n = 2 * self.max_offset + 1
        return TrajectoryConfig(count=n, step=self.step, width=self.resolution, height=self.resolution)

    @property
    def train_offsets(self) -> tuple[int, ...]:
        return tuple(o for o in range(-self.max_offset, self.max_offset + 1) if o not in HOLDOUT_OFFSETS)


@dataclass
class Corpus:
    scenes: list[QuadScene]
    train: list[TrainSample]
    buckets: dict[str, list[TrainSample]] = field(default_factory=dict)

    @property
    def holdout(self) -> list[TrainSample]:
        """Novel held-out targets (every bucket except the input view)."""
        return [s for name in BUCKETS[1:] for s in self.buckets.get(name, [])]


def make_pair(scene: QuadScene, scene_id: str, cam_in, cam_tgt, render_in, label: str) -> TrainSample:
    color_t, depth_t = raycast_render(scene, cam_tgt)
    color_i, depth_i = render_in
    soft = depth_visibility_mask(depth_i, depth_t, cam_in, cam_tgt, provenance="oracle-depth")
    exact = oracle_visibility(scene, cam_in, cam_tgt).data[:, :, 0]
    K = cam_tgt.pose.compose(cam_in.pose.inverse())
    return TrainSample(color_i, color_t, K, soft, cam_in, cam_tgt, f"{scene_id}/{label}", exact)


def build_corpus(cfg: CorpusConfig) -> Corpus:
    traj = cfg.trajectory()
    rng = np.random.default_rng(cfg.seed)
    scenes, train = [], []
    buckets: dict[str, list[TrainSample]] = {b: [] for b in BUCKETS}
    for i in range(cfg.n_scenes):
        scene = gen_scene(cfg.kind, cfg.seed * 1000 + i)
        sid = f"scene{i:02d}"
        cam_in = trajectory_camera(traj, 0)
        render_in = raycast_render(scene, cam_in)
        scenes.append(scene)
        for o in cfg.train_offsets:
            train.append(make_pair(scene, sid, cam_in, trajectory_camera(traj, o), render_in, f"{o:+d}"))
        buckets["input"].append(make_pair(scene, sid, cam_in, cam_in, render_in, "input"))
        for o in HOLDOUT_OFFSETS:
            buckets[f"+{abs(o)}"].append(make_pair(scene, sid, cam_in, trajectory_camera(traj, o), render_in, f"{o:+d}"))
        for u in rng.uniform(-cfg.window, cfg.window, cfg.uniform_per_scene):
            buckets["uniform"].append(
                make_pair(scene, sid, cam_in, trajectory_camera(traj, float(u)), render_in, f"u{u:+.3f}")
            )
    return Corpus(scenes, train, buckets)
