"""ECG abnormality detection with an ensemble of residual-attention networks."""

__version__ = "0.1.0"

CLASSES = ("Normal", "AF", "FDAVB", "CRBBB", "LAFB", "PVC", "PAC", "ER", "TWC")
NUM_CLASSES = len(CLASSES)
LEADS = ("I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6")
