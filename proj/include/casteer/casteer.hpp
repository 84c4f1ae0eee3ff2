#pragma once

#include <casteer/composer.hpp>
#include <casteer/container.hpp>
#include <casteer/error.hpp>
#include <casteer/heatmap.hpp>
#include <casteer/injector.hpp>
#include <casteer/manifest.hpp>
#include <casteer/steering.hpp>
#include <casteer/tensor.hpp>
#include <casteer/toy_model.hpp>
#include <casteer/vector_builder.hpp>
