#!/usr/bin/env python3

import logging
import os
from shutil import copyfile

from .core import SETTINGS_SECTION

logger = logging.getLogger(__name__)

RENAMED_KEYS = {
    'learning_rate': 'lr',
    'window_length_s': 'window_s',
    'rho': 'rho_phase',
    'channels': 'conv_channels',
    'ratios': 'downsampling_ratios',
}


def upgrade_settings(config):
    has_changed = False
    section = SETTINGS_SECTION
    if not config.has_section(section):
        return False
    # learning_rate: 6.6e-05 --> lr: 6.6e-05 (and the other plain renames)
    for old, new in RENAMED_KEYS.items():
        if config.has_option(section, old):
            v = config.get(section, old)
            config.remove_option(section, old)
            has_changed = True
            if not config.has_option(section, new):
                config.set(section, new, v)
    # w1, w2, w3 --> loss_weights: w1, w2, w3
    if any(config.has_option(section, key) for key in ('w1', 'w2', 'w3')):
        weights = [config.get(section, key, fallback='1.0') for key in ('w1', 'w2', 'w3')]
        for key in ('w1', 'w2', 'w3'):
            config.remove_option(section, key)
        has_changed = True
        if not config.has_option(section, 'loss_weights'):
            config.set(section, 'loss_weights', ', '.join(weights))
    # train_ratio, val_ratio, test_ratio --> split_ratios: train, val, test
    if any(config.has_option(section, key) for key in ('train_ratio', 'val_ratio', 'test_ratio')):
        defaults = {'train_ratio': '0.8', 'val_ratio': '0.1', 'test_ratio': '0.1'}
        ratios = [config.get(section, key, fallback=defaults[key]) for key in defaults]
        for key in defaults:
            config.remove_option(section, key)
        has_changed = True
        if not config.has_option(section, 'split_ratios'):
            config.set(section, 'split_ratios', ', '.join(ratios))
    return has_changed


def check_and_upgrade(config, config_path):
    # Check for deprecated keys in the settings file
    if not upgrade_settings(config):
        return False

    logger.warning('{} uses deprecated keys, rewriting it'.format(config_path))
    # Keep the first backup of the previous settings file
    backup_path = config_path + '.bak'
    if not os.path.isfile(backup_path):
        copyfile(config_path, backup_path)

    with open(config_path, 'w', encoding='utf-8') as settings_file:
        config.write(settings_file)
    return True
