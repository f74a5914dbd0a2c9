"""History matching and ABC calibration for stochastic simulators."""
