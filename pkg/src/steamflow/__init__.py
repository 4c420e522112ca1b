"""Neural control of an electro-mechanical steam valve.

Plant model, neural identification, three neural controllers
(NARMA-L2, model reference, predictive), performance metrics and a
closed-loop experiment harness.
"""

from .controllers import (ControllerFault, MrcController, NarmaL2Controller, NmpcController, ReferenceModel,
                          narma_l2_control, nmpc_control, reference_model_step, train_mrc)
from .harness import (ControllerBundle, RunRecord, Scenario, TrainingSettings, emit_csv, emit_plot,
                      reproduce_tables, run_scenario, train_controllers)
from .neural import Mlp, MlpRegressor, TappedDelayLine, TrainConfig, TrainingError, mlp_forward, mlp_gradient, train
from .plant import (ActuatorParams, DiscretePlant, StateSpace, TransferFunction, build_transfer_function,
                    discretize, make_plant, plant_step, tf_to_state_space)
from .signals import (NoiseConfig, ReferenceSignal, StepMetrics, TrackMetrics, noise_sample, sample_reference,
                      step_metrics, track_metrics)
from .sysid import (Dataset, ExcitationConfig, IdentificationError, NarmaL2Model, NarxModel, collect_dataset,
                    generate_excitation, identify_narma_l2, identify_narx)

__version__ = "0.1.0"
