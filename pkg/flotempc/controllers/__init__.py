from flotempc.controllers.baseline import BaselineController
from flotempc.controllers.empc import (EconomicMpc, EconomicWeights, EmpcConfig,
                                       EmpcState, build_constraints, build_objective,
                                       empc_step)
