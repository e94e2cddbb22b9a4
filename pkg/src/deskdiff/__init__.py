"""deskdiff: a desk-scale efficient diffusion pipeline.

Subpackages:
  flowcore    rectified-flow forward process, losses, Euler sampling, CFG
  archnet     efficient UNet variants + analytic parameter/FLOP cost model
  tinydec     tiny latent decoder, reconstruction training, PSNR
  kd          multi-level cross-architecture distillation with timestep-aware scaling
  stepdistill adversarial few-step distillation
  bench       CLI, datasets, run configs, checkpoints, metrics
"""

__version__ = "0.1.0"
