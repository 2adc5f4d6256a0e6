from .cbt import *
from .vocab import *
from .synthetic import *
from .batching import *
