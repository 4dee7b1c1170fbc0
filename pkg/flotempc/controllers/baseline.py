from builtins import object
import logging

import numpy as np

from flotempc.controllers.empc import EmpcState
from flotempc.flotation_model import ControlInput, as_array

logger = logging.getLogger(__name__)


class BaselineController(object):
    """
    Fixed setpoints with PI regulation only: every step returns the same
    command. Shares the cold_start / step surface of EconomicMpc so that the
    scenario runner can drive either.
    """

    def __init__(self, setpoints):
        self.setpoints = as_array(setpoints)
        if self.setpoints.shape != (2,):
            raise ValueError('setpoints must be [jg_setpoint, pulp_height_setpoint]')
        self.history = []

    @classmethod
    def from_nominal(cls, nominal):
        return cls([nominal['jg_setpoint'], nominal['pulp_height_setpoint']])

    def cold_start(self, applied_control=None):
        return EmpcState(applied_control=self.setpoints.copy())

    def step(self, state, x, z, disturbance):
        new_state = EmpcState(applied_control=self.setpoints.copy(),
                              measured_x=np.asarray(x, dtype=float),
                              measured_z=np.asarray(z, dtype=float),
                              steps=state.steps + 1)
        logger.debug('baseline step %d holds jg_sp=%.4f m/s, hp_sp=%.3f m',
                     state.steps, self.setpoints[0], self.setpoints[1])
        self.history.append({'step': state.steps, 'status': None})
        return ControlInput.from_array(self.setpoints), new_state, None
