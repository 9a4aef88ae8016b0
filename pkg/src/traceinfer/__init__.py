"""State inference for multivariate system traces.

Subpackages and modules
-----------------------
trace      traces, annotations, datasets and their file formats
simgen     autopilot flight simulator producing labelled traces
cpd        penalized change-point detection baselines
nn         the convolutional-recurrent state classifier
baselines  sliding-window ridge and decision-tree classifiers
metrics    change-point and classification scores
pipeline   experiment orchestration and reports
"""

__version__ = "0.1.0"
