"""Multi-channel deformable registration of body MRI with tissue-mask support."""

from .volgrid import (DisplacementField, GridMeta, LabelVolume, ScalarVolume, read_volume,
                      write_volume)
from .pyramid import Channel, ChannelStack, build_pyramid, upsample_field
from .energy import EnergyParams, total_energy
from .mincut import BinaryProblem, solve_binary
from .register import RegistrationConfig, register, run_registration
from .warp import jacobian_determinant, warp_labels, warp_scalar

__version__ = "0.1.0"
