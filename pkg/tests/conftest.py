import numpy as np
import pytest

from thermoslam.geometry import Intrinsics, PoseSE3, StereoRig, se3_exp


@pytest.fixture
def intr():
    return Intrinsics(400.0, 400.0, 320.0, 240.0)


@pytest.fixture
def rig(intr):
    return StereoRig(intr, 0.5, 640, 480)


def random_pose(rng, rot_scale=0.3, t_scale=1.0) -> PoseSE3:
    xi = np.concatenate(
        [rng.uniform(-rot_scale, rot_scale, 3), rng.uniform(-t_scale, t_scale, 3)]
    )
    return se3_exp(xi)
