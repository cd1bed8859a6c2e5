"""Muon-tomography defect segmentation pipeline.

Subpackages and modules:

    geometry    - target volumes, defects, ground-truth label grids
    transport   - simplified muon Monte Carlo producing plane hits
    features    - track fitting, scattering-point voxel features
    tensor      - dense tensors with reverse-mode autodiff
    network     - the dual-stream segmentation model and its variants
    losses      - weighted focal + soft-Dice training objective
    training    - splits, optimizer, schedule, augmentation, train loop
    evaluation  - segmentation and volume-level detection metrics
    pipeline    - campaign orchestration shared by the CLI commands
    cli         - the ``mutoseg`` command-line entry point
"""

__version__ = "0.1.0"
