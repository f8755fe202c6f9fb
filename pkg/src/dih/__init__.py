"""Knowledge distillation through intermediate classifier heads on a frozen teacher."""

__version__ = "0.1.0"
