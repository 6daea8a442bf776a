"""cvla: few-shot visuomotor diffusion policies with zero-initialized
object-conditioning adapters, plus the deterministic tabletop world and
training/evaluation tooling used to study them."""

__version__ = "0.1.0"
SCHEMA_VERSION = 1
