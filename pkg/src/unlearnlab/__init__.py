"""Machine unlearning lab: width-scaled MLPs, unlearning methods, tuning and evaluation."""

__version__ = "0.1.0"
