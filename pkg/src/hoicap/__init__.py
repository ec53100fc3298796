"""Visual-inertial capture of a human handling an object, on synthetic data.

Modules: ``geometry`` (rotations, meshes, alignment), ``imu`` (streams,
sync, calibration, simulation), ``render`` (soft silhouettes), ``simulate``
(synthetic scenes), ``optimize`` (pose tracking), ``diffusion``
(interaction filter), ``eval`` (Chamfer metrics) and ``cli``.
"""
__version__ = "0.1.0"
