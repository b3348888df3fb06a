"""Sleep-stage classification from single-channel EOG.

SE-ResNet epoch encoder + transformer over contextual windows, trained with
Adam/NLL, evaluated with accuracy/MF1/kappa, interpreted with 1D-GradCAM and
exact t-SNE. Built on an in-repo reverse-mode autodiff tensor library.
"""

__version__ = "0.1.0"
