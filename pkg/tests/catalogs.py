"""Hand-built catalogs shared by the dataset, CLI and acceptance tests."""

from vidcam.dataset import VideoCatalog, VideoRecord
from vidcam.frames import SCENARIOS

# 28 kept devices in listing order; a trailing tag marks units of the same model
KEPT = [
    ("Apple", "iPhone 4"), ("Apple", "iPhone 4s"), ("Apple", "iPhone 4s"), ("Apple", "iPhone 5"),
    ("Apple", "iPhone 5"), ("Apple", "iPhone 5c"), ("Apple", "iPhone 5c"), ("Apple", "iPhone 5c"),
    ("Apple", "iPhone 6"), ("Apple", "iPhone 6"), ("Apple", "iPhone 6 Plus"), ("Huawei", "Ascend"),
    ("Huawei", "Honor 5C"), ("Huawei", "P8"), ("Huawei", "P9"), ("Huawei", "P9 Lite"), ("Lenovo", "P70A"),
    ("LG", "D290"), ("OnePlus", "3"), ("OnePlus", "3"), ("Samsung", "Galaxy S3 Mini"),
    ("Samsung", "Galaxy S3 Mini"), ("Samsung", "Galaxy S3"), ("Samsung", "Galaxy S4 Mini"),
    ("Samsung", "Galaxy S5"), ("Samsung", "Galaxy Tab 3"), ("Sony", "Xperia Z1 Compact"), ("Xiaomi", "Redmi Note 3"),
]
# six single-unit devices with too few shared videos, plus the excluded model
DROPPED = [("Mock", f"Sparse {i}") for i in range(1, 7)]
EXCLUDED = ("Asus", "Zenfone 2 Laser")


def device_videos(device_id, brand, model, n_native, n_shared, wa_only=0):
    """``n_native`` natives cycling scenarios; the first ``n_shared`` get both social versions,
    the next ``wa_only`` get a WhatsApp version only."""
    out = []
    for i in range(n_native):
        scen = SCENARIOS[i % 3]
        nid = f"{device_id}_V_{scen}_{i:03d}"
        out.append(VideoRecord(nid, device_id, brand, model, scen, "native"))
        socials = ("whatsapp", "youtube") if i < n_shared else ("whatsapp",) if i < n_shared + wa_only else ()
        for s in socials:
            out.append(VideoRecord(f"{nid}_{s[:2].upper()}", device_id, brand, model, scen, s, nid))
    return out


def selection_catalog() -> VideoCatalog:
    """35 devices: 28 pass the selection rules, 6 are too sparse, one is excluded by name."""
    videos, n = [], 0
    counts = {}
    for b, m in KEPT:
        counts[(b, m)] = counts.get((b, m), 0) + 1
    for b, m in KEPT:
        n += 1
        multi = counts[(b, m)] > 1
        # same-model units are kept through the sibling rule despite few shared videos
        native, shared = (14, 9) if multi else (19, 18)
        videos += device_videos(f"D{n:02d}", b, m, native, shared, wa_only=native - shared)
    for b, m in DROPPED:
        n += 1
        videos += device_videos(f"D{n:02d}", b, m, 15, 11, wa_only=4)
    n += 1
    videos += device_videos(f"D{n:02d}", *EXCLUDED, 20, 20)
    return VideoCatalog(videos)


def split_catalog(devices=28, min_native=13, max_native=20) -> VideoCatalog:
    """Every native shared on both platforms; native counts spread over [min_native, max_native]."""
    videos = []
    span = max_native - min_native + 1
    for d in range(devices):
        b, m = KEPT[d % len(KEPT)]
        videos += device_videos(f"D{d + 1:02d}", b, m, min_native + (d * 5) % span, 10**6)
    return VideoCatalog(videos)
