from forge.harness.config import ExperimentConfig


def tiny_config(seed=0) -> ExperimentConfig:
    cfg = ExperimentConfig().with_seed(seed)
    cfg.datagen.n_source = cfg.datagen.n_target = 12
    cfg.datagen.image_size = 64
    cfg.evaluation.n_source = cfg.evaluation.n_target = 6
    cfg.evaluation.sequences = 1
    cfg.evaluation.sequence_frames = 4
    cfg.optimizer.steps = 4
    cfg.optimizer.batch_size = 4
    cfg.descriptor_optimizer.steps = 4
    cfg.descriptor_optimizer.batch_size = 4
    cfg.pairs.train_worlds = 8
    cfg.pairs.eval_worlds = 4
    cfg.mars.crop_size = 32
    cfg.adapt.top_k = 4
    return cfg
