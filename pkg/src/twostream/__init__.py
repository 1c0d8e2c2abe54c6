"""Two-stream (spatial/temporal) video denoising UNet on a small reverse-mode engine."""

__version__ = "0.1.0"
