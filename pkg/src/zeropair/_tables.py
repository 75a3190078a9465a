"""Fixed color tables: the 19-class street-scene palette and a 64-stop viridis ramp."""

CITYSCAPES_NAMES = (
    "road", "sidewalk", "building", "wall", "fence", "pole", "traffic light",
    "traffic sign", "vegetation", "terrain", "sky", "person", "rider", "car",
    "truck", "bus", "train", "motorcycle", "bicycle",
)

CITYSCAPES_COLORS = (
    (128, 64, 128), (244, 35, 232), (70, 70, 70), (102, 102, 156),
    (190, 153, 153), (153, 153, 153), (250, 170, 30), (220, 220, 0),
    (107, 142, 35), (152, 251, 152), (70, 130, 180), (220, 20, 60),
    (255, 0, 0), (0, 0, 142), (0, 0, 70), (0, 60, 100), (0, 80, 100),
    (0, 0, 230), (119, 11, 32),
)

# toy classes borrow colors from the street palette: ground=road, sky, box=building,
# disc=car, pole
TOY_NAMES = ("ground", "sky", "box", "disc", "pole")
TOY_COLORS = (
    (128, 64, 128), (70, 130, 180), (70, 70, 70), (0, 0, 142), (153, 153, 153),
)

# viridis sampled at k/63, k = 0..63, rounded to 8 bits
VIRIDIS_64 = (
    (68, 1, 84),
    (70, 7, 90),
    (71, 13, 96),
    (71, 19, 101),
    (72, 24, 106),
    (72, 29, 111),
    (72, 35, 116),
    (72, 40, 120),
    (71, 45, 123),
    (70, 50, 126),
    (69, 55, 129),
    (68, 59, 132),
    (66, 64, 134),
    (64, 69, 136),
    (62, 73, 137),
    (61, 78, 138),
    (58, 83, 139),
    (56, 88, 140),
    (54, 92, 141),
    (52, 96, 141),
    (50, 100, 142),
    (49, 104, 142),
    (47, 108, 142),
    (45, 112, 142),
    (44, 115, 142),
    (42, 119, 142),
    (41, 123, 142),
    (39, 127, 142),
    (38, 130, 142),
    (36, 134, 142),
    (35, 138, 141),
    (33, 142, 141),
    (32, 146, 140),
    (31, 150, 139),
    (31, 154, 138),
    (31, 158, 137),
    (31, 161, 135),
    (33, 165, 133),
    (35, 169, 131),
    (38, 173, 129),
    (42, 176, 127),
    (47, 180, 124),
    (53, 183, 121),
    (59, 187, 117),
    (66, 190, 113),
    (74, 193, 109),
    (82, 197, 105),
    (90, 200, 100),
    (101, 203, 94),
    (110, 206, 88),
    (119, 209, 83),
    (129, 211, 77),
    (139, 214, 70),
    (149, 216, 64),
    (160, 218, 57),
    (170, 220, 50),
    (181, 222, 43),
    (192, 223, 37),
    (202, 225, 31),
    (213, 226, 26),
    (223, 227, 24),
    (234, 229, 26),
    (244, 230, 30),
    (253, 231, 37),
)
