"""
ghnforge: графовые гиперсети, предсказывающие параметры нейросетей по их графу
"""
__version__ = "0.1.0"
