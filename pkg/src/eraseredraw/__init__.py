"""Erase-then-redraw data augmentation for free-space segmentation, at desk scale.

Modules
-------
tensorcore    float64 tensors, reverse-mode autodiff, Adam/SGD, RFCK checkpoints
imaging       image/mask values, masked composition, PPM/PGM codecs
scenes        procedural road scenes with free-space labels and instance masks
classic_aug   baseline augmentations (basic, random erasing, cutout, cutmix, gridmask)
diffusion     masked DDPM: schedule, denoiser, training, inpainting
maskprovider  oracle / heuristic instance masks that never touch free space
pipeline      erase-then-redraw operator and the k-synthetics-per-original protocol
segharness    tiny U-Net segmenter, pixel metrics, results table
cli           ``python -m eraseredraw`` stage runner
"""

__version__ = "0.1.0"
