"""
Test cases for the Vocabulary model
"""

import logging
from unittest import TestCase
from service.models import (
    CLS_ID,
    FIRST_DISEASE_ID,
    MASK_ID,
    PAD_ID,
    SEP_ID,
    SPECIAL_TOKENS,
    UNK_ID,
    DataValidationError,
    PatientRecord,
    Visit,
    Vocabulary,
    build_vocabulary,
)
from wsgi import app


######################################################################
#  V O C A B U L A R Y   T E S T   C A S E S
######################################################################
class TestVocabulary(TestCase):
    """Test Cases for the token space"""

    @classmethod
    def setUpClass(cls):
        """This runs once before the entire test suite"""
        app.logger.setLevel(logging.CRITICAL)
        app.app_context().push()

    def setUp(self):
        """This runs before each test"""
        self.cohort = [
            PatientRecord("P1", (Visit(("G2", "G0"), 10, 40, 2010), Visit(("G1",), 20, 41, 2011))),
            PatientRecord("P2", (Visit(("G0",), 10, 70, 2015),)),
        ]

    def test_special_token_ids(self):
        """It should reserve ids 0..4 for the special tokens"""
        self.assertEqual((PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID), (0, 1, 2, 3, 4))
        self.assertEqual(FIRST_DISEASE_ID, len(SPECIAL_TOKENS))
        vocab = build_vocabulary(self.cohort)
        for token_id, token in enumerate(SPECIAL_TOKENS):
            self.assertEqual(vocab.token(token_id), token)

    def test_groups_are_sorted(self):
        """It should give disease groups contiguous ids in sorted order"""
        vocab = build_vocabulary(self.cohort)
        self.assertEqual(vocab.groups, ("G0", "G1", "G2"))
        self.assertEqual([vocab.token_id(group) for group in vocab.groups], [5, 6, 7])
        self.assertEqual(vocab.size, 8)
        self.assertEqual(vocab.num_groups, 3)
        self.assertEqual(vocab.token(7), "G2")

    def test_unknown_label(self):
        """It should map unknown labels to UNK"""
        vocab = build_vocabulary(self.cohort)
        self.assertEqual(vocab.token_id("G9"), UNK_ID)
        self.assertIsNone(vocab.label_index("G9"))
        self.assertIsNone(vocab.label_index(SPECIAL_TOKENS[CLS_ID]))
        self.assertEqual(vocab.label_index("G1"), 1)

    def test_bucket_clipping(self):
        """It should clip ages and years into their buckets"""
        vocab = Vocabulary(("G0",), age_buckets=121, base_year=2000, year_buckets=50)
        self.assertEqual(vocab.age_id(45), 45)
        self.assertEqual(vocab.age_id(130), 120)
        self.assertEqual(vocab.year_id(2013), 13)
        self.assertEqual(vocab.year_id(1990), 0)
        self.assertEqual(vocab.year_id(2100), 49)

    def test_serialize_a_vocabulary(self):
        """It should serialize and deserialize a Vocabulary"""
        vocab = build_vocabulary(self.cohort)
        data = vocab.serialize()
        self.assertEqual(data["groups"], ["G0", "G1", "G2"])
        self.assertEqual(Vocabulary.deserialize(data), vocab)

    def test_deserialize_missing_data(self):
        """It should not deserialize a Vocabulary with missing data"""
        self.assertRaises(DataValidationError, Vocabulary.deserialize, {"groups": ["G0"]})

    def test_rejects_clashing_labels(self):
        """It should reject group labels that look like special tokens"""
        self.assertRaises(DataValidationError, Vocabulary, ("G0", "[MASK]"))

    def test_rejects_empty_cohort(self):
        """It should not build a vocabulary from nothing"""
        self.assertRaises(DataValidationError, build_vocabulary, [])
