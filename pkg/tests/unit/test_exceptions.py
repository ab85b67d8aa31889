from morphmark import exceptions


class TestMorphmarkError:
    def setup_class(self):
        self.instance = exceptions.MorphmarkError()

    def test_init(self):
        assert isinstance(self.instance, exceptions.MorphmarkError)


class TestInvalidSettingsPath(TestMorphmarkError):
    def setup_class(self):
        self.instance = exceptions.InvalidSettingsPath("settings_path")

    def test_variables(self):
        assert self.instance.settings_path == "settings_path"


class TestUnsupportedSettings(TestMorphmarkError):
    def setup_class(self):
        self.instance = exceptions.UnsupportedSettings(
            {"apply": {"value": "true", "source": "/"}}
        )

    def test_variables(self):
        assert self.instance.unsupported_settings == {"apply": {"value": "true", "source": "/"}}
        assert "apply = true" in str(self.instance)


class TestPresetDoesNotExist(TestMorphmarkError):
    def setup_class(self):
        self.instance = exceptions.PresetDoesNotExist("preset")

    def test_variables(self):
        assert self.instance.preset == "preset"
        assert "smoke" in str(self.instance)


class TestInvalidImage(TestMorphmarkError):
    def setup_class(self):
        self.instance = exceptions.InvalidImage("odd side", "a.png")

    def test_variables(self):
        assert self.instance.reason == "odd side"
        assert self.instance.source == "a.png"
        assert isinstance(self.instance, ValueError)


class TestInvalidCoordinates(TestMorphmarkError):
    def setup_class(self):
        self.instance = exceptions.InvalidCoordinates(3)

    def test_variables(self):
        assert self.instance.count == 3


class TestShapeMismatch(TestMorphmarkError):
    def setup_class(self):
        self.instance = exceptions.ShapeMismatch("l_sim", [1, 1, 8, 8], [1, 1, 8, 10])

    def test_variables(self):
        assert self.instance.operation == "l_sim"
        assert self.instance.first == (1, 1, 8, 8)
        assert self.instance.second == (1, 1, 8, 10)


class TestSingularTransform(TestMorphmarkError):
    def setup_class(self):
        self.instance = exceptions.SingularTransform("zero determinant")

    def test_variables(self):
        assert self.instance.reason == "zero determinant"


class TestDegenerateMask(TestMorphmarkError):
    def setup_class(self):
        self.instance = exceptions.DegenerateMask(0.0)

    def test_variables(self):
        assert self.instance.mask_sum == 0.0


class TestNegativeWeight(TestMorphmarkError):
    def setup_class(self):
        self.instance = exceptions.NegativeWeight("lambda2", -1.0)

    def test_variables(self):
        assert self.instance.name == "lambda2"
        assert self.instance.value == -1.0


class TestDifferentiationError(TestMorphmarkError):
    def setup_class(self):
        self.instance = exceptions.DifferentiationError("loss is nan", "l_esim")

    def test_variables(self):
        assert self.instance.reason == "loss is nan"
        assert self.instance.operation == "l_esim"
        assert "offending operation: l_esim" in str(self.instance)


class TestNonFiniteLoss(TestMorphmarkError):
    def setup_class(self):
        self.instance = exceptions.NonFiniteLoss("l_sim", 3, 7, "run/stage1.ckpt")

    def test_variables(self):
        assert self.instance.term == "l_sim"
        assert self.instance.epoch == 3
        assert self.instance.step == 7
        assert self.instance.checkpoint == "run/stage1.ckpt"
        assert isinstance(self.instance, ArithmeticError)


class TestDatasetTooSmall(TestMorphmarkError):
    def setup_class(self):
        self.instance = exceptions.DatasetTooSmall(1, 2)

    def test_variables(self):
        assert self.instance.size == 1
        assert self.instance.required == 2


class TestEmptyLossList(TestMorphmarkError):
    def setup_class(self):
        self.instance = exceptions.EmptyLossList()


class TestLandmarkCountMismatch(TestMorphmarkError):
    def setup_class(self):
        self.instance = exceptions.LandmarkCountMismatch((5, 2), (4, 2))

    def test_variables(self):
        assert self.instance.predicted == (5, 2)
        assert self.instance.reference == (4, 2)


class TestUnsupportedTransform(TestMorphmarkError):
    def setup_class(self):
        self.instance = exceptions.UnsupportedTransform("perspective")

    def test_variables(self):
        assert self.instance.kind == "perspective"
        assert isinstance(self.instance, NotImplementedError)


class TestMissingArtifact(TestMorphmarkError):
    def setup_class(self):
        self.instance = exceptions.MissingArtifact("run/stage1.ckpt", "train-stage1")

    def test_variables(self):
        assert self.instance.path == "run/stage1.ckpt"
        assert self.instance.produced_by == "train-stage1"
        assert "morphmark train-stage1" in str(self.instance)
        assert isinstance(self.instance, FileNotFoundError)


class TestOutputNotWritable(TestMorphmarkError):
    def setup_class(self):
        self.original = PermissionError("denied")
        self.instance = exceptions.OutputNotWritable("/out", self.original)

    def test_variables(self):
        assert self.instance.path == "/out"
        assert self.instance.original_error is self.original
