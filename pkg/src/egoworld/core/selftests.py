"""EgoWorld core: in-process self tests."""

from __future__ import annotations

import tempfile
from pathlib import Path
from typing import Tuple

import numpy as np
import torch

from .cdit import CDiT, build_masks
from .codec import FrameCodec
from .config import PlanConfig
from .diffusion import make_schedule, q_sample
from .evalkit import GaussianStats, frechet_distance, psnr
from .formats import read_pose_file, write_pose_file
from .kinematics import ACTION_DIM, NormalizationBounds, euler_to_quat, quat_to_euler, raw_action, to_rotation
from .models import PoseFrame
from .planner import cem_plan


class EgoWorldSelfTests:
    """
    Fast oracle checks on tiny inputs; no dataset or checkpoint needed.
    """

    @staticmethod
    def run() -> Tuple[bool, str]:
        report_lines = []
        ok = True

        def fail(msg: str) -> None:
            nonlocal ok
            ok = False
            report_lines.append("FAIL: " + msg)

        def pass_(msg: str) -> None:
            report_lines.append("OK: " + msg)

        rng = np.random.default_rng(0)

        # 1) Euler <-> quaternion
        euler = rng.uniform(-1.2, 1.2, size=(64, 3))
        back = quat_to_euler(euler_to_quat(euler))
        err = np.abs(to_rotation(euler_to_quat(back)).as_matrix() - to_rotation(euler_to_quat(euler)).as_matrix()).max()
        if err > 1e-6:
            fail(f"Euler round trip error {err:.3g}.")
        else:
            pass_("Euler round trip.")

        # 2) Action layout and normalization
        q = euler_to_quat(rng.uniform(-0.5, 0.5, size=(15, 3)))
        p0 = PoseFrame(0.0, np.zeros(3), q)
        p1 = PoseFrame(0.25, np.array([0.2, 0.0, 0.0]), euler_to_quat(rng.uniform(-0.5, 0.5, size=(15, 3))))
        raw = raw_action(p0, p1)
        bounds = NormalizationBounds.fixed()
        if raw.shape != (ACTION_DIM,):
            fail(f"Action has {raw.shape} components.")
        elif np.abs(bounds.denormalize(bounds.normalize(raw)) - raw).max() > 1e-6:
            fail("Normalize/denormalize round trip.")
        else:
            pass_("Action layout and normalization.")

        # 3) Pose file
        with tempfile.TemporaryDirectory() as td:
            path = Path(td) / "poses.bin"
            write_pose_file([p0.as_float32(), p1.as_float32()], path)
            loaded = read_pose_file(path)
            if len(loaded) != 2 or not np.allclose(loaded[1].joint_rotations, p1.as_float32().joint_rotations):
                fail("Pose file round trip.")
            else:
                pass_("Pose file round trip.")

        # 4) Codec
        frames = rng.integers(0, 256, size=(2, 8, 8, 3), dtype=np.uint8)
        codec = FrameCodec("patch_linear", resolution=8)
        if not np.array_equal(codec.decode_frame(codec.encode_frame(frames)), frames):
            fail("Patch codec round trip is not exact.")
        else:
            pass_("Patch codec round trip.")

        # 5) Forward noising
        schedule = make_schedule(100)
        s = torch.full((20000, 1), 0.5, dtype=torch.float64)
        tau = torch.full((20000,), 60, dtype=torch.long)
        z = q_sample(s, tau, torch.randn(s.shape, generator=torch.Generator().manual_seed(0), dtype=s.dtype), schedule)
        ab = schedule.alphas_cumprod[60]
        if abs(float(z.mean()) - np.sqrt(ab) * 0.5) > 0.02 or abs(float(z.var()) - (1 - ab)) > 0.03:
            fail("q_sample statistics.")
        else:
            pass_("q_sample statistics.")

        # 6) Mask causality
        torch.manual_seed(0)
        model = CDiT(latent_dim=12, tokens_per_frame=4, width=32, layers=1, heads=4, max_frames=4)
        for p in model.parameters():
            torch.nn.init.normal_(p, std=0.05)
        masks = build_masks(4, 2, 4, "train_prefix")
        x = torch.randn(1, 4, 4, 12)
        acts, dts = torch.zeros(1, 4, ACTION_DIM), torch.zeros(1, 4)
        taus = torch.zeros(1, 4, dtype=torch.long)
        with torch.no_grad():
            base, _ = model(x, x, acts, dts, taus, masks)
            x2 = x.clone()
            x2[:, 3] += 1.0
            pert, _ = model(x2, x2, acts, dts, taus, masks)
        if not torch.equal(base[:, :3], pert[:, :3]):
            fail("Future frame leaked into earlier outputs.")
        else:
            pass_("Mask causality.")

        # 7) Frechet distance
        mu = rng.normal(size=4)
        fd = frechet_distance(GaussianStats(np.zeros(4), np.eye(4)), GaussianStats(mu, np.eye(4)))
        if abs(fd - float(mu @ mu)) > 1e-6:
            fail(f"Frechet mean-shift identity ({fd:.6g}).")
        else:
            pass_("Frechet distance identity.")

        # 8) PSNR and CEM
        if psnr(frames, frames) != 99.0:
            fail("PSNR of identical frames must be capped.")
        target = rng.uniform(-0.5, 0.5, size=12)
        plan = cem_plan(lambda d, it: (((d - target) ** 2).sum(axis=1), None), np.zeros(12), np.ones(12),
                        PlanConfig(population=64, iterations=50, seed=0))
        if np.abs(plan.state.mean - target).max() > 1e-2:
            fail("CEM did not converge on a quadratic.")
        elif any(b > a for a, b in zip(plan.state.history, plan.state.history[1:])):
            fail("CEM best energy increased.")
        else:
            pass_("CEM quadratic convergence.")

        return ok, "\n".join(report_lines)
