"""Collision-prone vehicle interaction detection at intersections."""

from .tracks import TrackDataset, TrackPoint, VehicleTrack, ingest_tracks, resample
from .interaction import (FeatureScaler, InteractionFeature, InteractionTrajectory,
                          apply_scaler, build_interactions, fit_scaler)
from .energy import (AgentState, CollisionParams, GAConfig, SafetyLabeling,
                     collision_energy, fit_all, fit_params, label_dataset)
from .recurrent import (ARCHITECTURES, CellParams, EncoderConfig, EncoderModel,
                        LayerSpec, backward, build_architecture, encode,
                        gru_step, lstm_step)
from .siamese import TrainConfig, Triplet, split_dataset, train, triplet_loss
from .evaluation import RetrievalReport, ablate, evaluate, knn_classify
from .simulate import ScenarioConfig, generate

__version__ = "0.1.0"
