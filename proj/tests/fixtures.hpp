#pragma once

#include "pqnet/modelio.hpp"
#include "pqnet/pipeline.hpp"

namespace fixtures {

struct ToyTeacher {
    pqnet::InMemoryDataset train;
    pqnet::InMemoryDataset test;
    pqnet::Network teacher;
};

/// Toy CNN trained on stripes, built once per process.
inline const ToyTeacher& toy_teacher() {
    static const ToyTeacher fx = [] {
        pqnet::Rng rng(2024);
        auto train = pqnet::make_stripes(512, rng);
        auto test = pqnet::make_stripes(256, rng);
        pqnet::Network net = pqnet::parse_architecture(pqnet::toy_cnn_architecture());
        net.init_parameters(rng);
        pqnet::TrainConfig cfg;
        cfg.epochs = 6;
        net = pqnet::train_toy_teacher(std::move(net), train, cfg, rng);
        return ToyTeacher{std::move(train), std::move(test), std::move(net)};
    }();
    return fx;
}

}  // namespace fixtures
