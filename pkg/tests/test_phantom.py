import numpy as np
import pytest

from sonodistill.errors import ConfigError
from sonodistill.phantom import (
    PATIENT_BLOCK,
    PhantomSpec,
    generate_phantom,
    phantom_palette,
)


def test_same_spec_and_index_is_byte_identical():
    spec = PhantomSpec(seed=11)
    a = generate_phantom(spec, 5)
    b = generate_phantom(spec, 5)
    assert a.image.tobytes() == b.image.tobytes()
    assert a.mask.tobytes() == b.mask.tobytes()
    assert a.class_label == b.class_label
    assert a.patient_id == b.patient_id


def test_different_indices_differ():
    spec = PhantomSpec(seed=11)
    a = generate_phantom(spec, 0)
    b = generate_phantom(spec, 1)
    assert a.image.tobytes() != b.image.tobytes()


def test_zero_structures_gives_background_mask():
    spec = PhantomSpec(structure_count=0, seed=3)
    sample = generate_phantom(spec, 0)
    assert (sample.mask == 0).all()


def test_class_histogram_covers_all_classes():
    # oracle: count labels over a generated corpus
    spec = PhantomSpec(class_count=6, seed=7)
    counts = np.zeros(6, dtype=int)
    for i in range(1000):
        counts[generate_phantom(spec, i).class_label] += 1
    assert (counts > 0).all()


def test_mask_values_stay_in_palette():
    spec = PhantomSpec(structure_count=3, seed=5)
    palette = set(phantom_palette(spec)) | {0}
    for i in range(50):
        values = set(np.unique(generate_phantom(spec, i).mask).tolist())
        assert values <= palette


def test_patients_are_blocks_of_consecutive_indices():
    spec = PhantomSpec(seed=0)
    first_block = {generate_phantom(spec, i).patient_id for i in range(PATIENT_BLOCK)}
    assert len(first_block) == 1
    next_patient = generate_phantom(spec, PATIENT_BLOCK).patient_id
    assert next_patient not in first_block


def test_invalid_spec_rejected():
    with pytest.raises(ConfigError):
        PhantomSpec(image_size=0)
    with pytest.raises(ConfigError):
        PhantomSpec(class_count=0)
    with pytest.raises(ConfigError):
        PhantomSpec(structure_count=-1)
    with pytest.raises(ConfigError):
        generate_phantom(PhantomSpec(), -1)


def test_image_is_speckled_not_flat():
    sample = generate_phantom(PhantomSpec(seed=9), 0)
    assert sample.image.std() > 10  # uint8 scale
