"""Desk-scale planar box-catching laboratory.

Subsystems: demonstration-trace regeneration, a latent-plan sequence policy
trained by classical variational Bayes, incremental variational replanning,
QP-based MPC tracking, and a contact simulator with baseline policies.
"""

__version__ = "0.1.0"
