"""Common presets are defined here to be easily used within a project using --preset {name}"""
from typing import Any, Dict

desk = {
    "stage1.epochs": 90,
    "stage2.epochs": 60,
}
smoke = {
    "data.size": 32,
    "data.count": 6,
    "data.landmarks": 3,
    "regnet.d_model": 16,
    "regnet.heads": 2,
    "regnet.layers": 1,
    "regnet.steps": 1,
    "regnet.window_grid": 2,
    "stage1.epochs": 1,
    "stage1.batch_size": 4,
    "stage2.epochs": 1,
    "stage2.batch_size": 2,
    "stage2.base_channels": 4,
}
full = {
    "stage1.epochs": 750,
    "stage2.epochs": 100,
    "stage2.batch_size": 8,
}

presets: Dict[str, Dict[str, Any]] = {
    "desk": desk,
    "smoke": smoke,
    "full": full,
}
