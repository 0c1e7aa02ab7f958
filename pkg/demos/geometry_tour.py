"""Rigid alignment and the error metrics, on a small hand-made example."""

import numpy as np
from scipy.spatial.transform import Rotation

from flowreg import RigidTransform, chamfer_distance, kabsch_align, rotation_error_deg, translation_error_m
from flowreg.errors import DegenerateGeometry

rng = np.random.default_rng(0)
cloud = rng.normal(size=(16, 3))
truth = RigidTransform(Rotation.from_euler("xyz", [30, -10, 75], degrees=True).as_matrix(), [1.0, -2.0, 0.5])

est = kabsch_align(cloud, truth.apply(cloud))
print("rotation error    %.2e deg" % rotation_error_deg(truth.rotation, est.rotation))
print("translation error %.2e m" % translation_error_m(truth.translation, est.translation))

# with noisy correspondences the fit is no longer exact, but the errors stay small
noisy = truth.apply(cloud) + rng.normal(scale=0.01, size=cloud.shape)
est = kabsch_align(cloud, noisy)
print("noisy: RE %.3f deg, TE %.4f m" % (rotation_error_deg(truth.rotation, est.rotation),
                                          translation_error_m(truth.translation, est.translation)))

# Chamfer distance is symmetric and in the cloud's units
print("chamfer to itself  ", chamfer_distance(cloud, cloud))
print("chamfer after 0.1 m", round(chamfer_distance(cloud, cloud + [0.1, 0, 0]), 6))

# three points on a line leave the spin about that line undetermined
try:
    kabsch_align(np.outer(np.arange(3.0), [1, 1, 0]), np.outer(np.arange(3.0), [0, 1, 1]))
except DegenerateGeometry as err:
    print("collinear input rejected:", err)
