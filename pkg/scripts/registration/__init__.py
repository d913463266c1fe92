"""
Registration Module

Self-supervised, coarse-to-fine registration of speckle image sequences
with one small U-Net per scale, trained on the sequence itself.

Modules:
- tensor_core.py: define-by-run reverse-mode differentiation over numpy arrays
- warp_field.py: images, flow fields, warping, downsampling and composition
- losses.py: windowed cross-correlation and smoothness objectives
- optimizer.py: Adam with bias correction
- unet.py: network parameters, initialization and forward pass
- pipeline.py: per-scale optimization, run_nmsr and pretrain
- synth.py: synthetic sequences with ground-truth flow
- metrics.py: MSE, Mean CC and endpoint error reports
- io_viz.py: PGM/PPM, .flo, checkpoints and colour-wheel rendering
- selftest.py: gradient, oracle and field-algebra checks
- cli.py: command line entry point

Usage:
    python cli.py --help

Example workflow:
    1. python cli.py gen --kind vortex --size 128 --output seq/
    2. python cli.py register seq/ --output results/
    3. python cli.py eval seq/ results/
    4. python cli.py viz results/
"""

__version__ = "1.0.0"
