"""Import all submodules when importing the actions module"""
# when doing `import matnet.actions`
from . import action
from . import sgvb_update
from . import metrics
from . import kl_profile
from . import eval_action
from . import checkpoint

# when doing `from matnet.actions import *` (not recommended)
__all__ = [
    "action",
    "sgvb_update",
    "metrics",
    "kl_profile",
    "eval_action",
    "checkpoint",
]
