from .ac import AcConfig, erase_ac, model_based_loss
from .common import CurveLog, select_parameters, trainable_copy
from .esd import EsdConfig, erase_esd, esd_target
from .fmn import FmnConfig, attention_mass, attention_resteer_loss, erase_fmn
from .sa import SaConfig, diagonal_fisher, erase_sa, ewc_penalty, sa_objective
from .uce import UceConfig, UceEdit, erase_uce, make_uce_edit, uce_closed_form
from .weightfree import concept_prompt, make_np_guidance, make_sld_guidance

METHODS = ("esd", "uce", "sa", "fmn", "ac", "np", "sld")
WEIGHT_FREE = ("np", "sld")

__all__ = [
    "AcConfig", "CurveLog", "EsdConfig", "FmnConfig", "METHODS", "SaConfig", "UceConfig", "UceEdit", "WEIGHT_FREE",
    "attention_mass", "attention_resteer_loss", "concept_prompt", "diagonal_fisher", "erase_ac", "erase_esd",
    "erase_fmn", "erase_sa", "erase_uce", "esd_target", "ewc_penalty", "make_np_guidance", "make_sld_guidance",
    "make_uce_edit", "model_based_loss", "sa_objective", "select_parameters", "trainable_copy", "uce_closed_form",
]
