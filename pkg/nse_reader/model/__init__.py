from .layers import *
from .params import *
from .core import *
from .prediction import *
