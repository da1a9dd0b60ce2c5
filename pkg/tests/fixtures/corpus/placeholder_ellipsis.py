def is_behind(a, b):
    ...


def solve(symbols):
    objects = symbols["objects"]
    return sum(1 for o in objects if o["x"] > 0.5)
