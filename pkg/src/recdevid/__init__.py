"""Recording-device identification from tandem audio features.

Submodules are imported lazily so that ``recdevid.cli`` can pin BLAS threads
before numpy loads.
"""
import importlib

__version__ = "0.1.0"

_EXPORTS = {
    "AudioClip": "audio", "load_wav": "audio", "parse_wav": "audio", "segment": "audio",
    "FrameSpec": "features", "extract_tandem": "features", "extract_matrix": "features",
    "Tensor": "tensor", "finite_diff_check": "tensor",
    "ModelConfig": "model", "DeviceIdModel": "model", "ablation_config": "model", "build": "model",
    "TrainConfig": "train", "evaluate": "train", "transfer_finetune": "train",
    "MetricsReport": "metrics", "save_checkpoint": "checkpoint", "load_checkpoint": "checkpoint",
    "read_ttf1": "ttf", "write_ttf1": "ttf",
    "SynthCorpusSpec": "synth", "build_corpus": "synth",
}

__all__ = sorted(_EXPORTS) + ["__version__"]


def __getattr__(name):
    if name in _EXPORTS:
        return getattr(importlib.import_module(f".{_EXPORTS[name]}", __name__), name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
