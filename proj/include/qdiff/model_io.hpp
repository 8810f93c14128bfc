#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "qdiff/checkpoint.hpp"
#include "qdiff/unet.hpp"

namespace qdiff {

inline nlohmann::json config_to_json(const UnetConfig& c) {
    return nlohmann::json{{"in_channels", c.in_channels},
                          {"base_channels", c.base_channels},
                          {"channel_mult", c.channel_mult},
                          {"groups", c.groups},
                          {"attention", c.attention},
                          {"temb_dim", c.temb_dim},
                          {"attn_heads", c.attn_heads},
                          {"image_size", c.image_size}};
}

inline UnetConfig config_from_json(const nlohmann::json& j) {
    UnetConfig c;
    c.in_channels = j.at("in_channels").get<int>();
    c.base_channels = j.at("base_channels").get<int>();
    c.channel_mult = j.at("channel_mult").get<std::vector<int>>();
    c.groups = j.at("groups").get<int>();
    c.attention = j.at("attention").get<bool>();
    c.temb_dim = j.at("temb_dim").get<int>();
    c.attn_heads = j.at("attn_heads").get<int>();
    c.image_size = j.at("image_size").get<int>();
    c.validate();
    return c;
}

inline void save_model(const UnetModel& m, const std::string& path) {
    nlohmann::json header;
    header["version"] = 1;
    header["kind"] = "unet";
    header["role"] = role_name(m.role);
    header["config"] = config_to_json(m.cfg);
    nlohmann::json params = nlohmann::json::array();
    std::vector<const Tensor*> tensors;
    for (const auto& p : m.params) {
        params.push_back({{"name", p.name}, {"shape", p.value.shape}});
        tensors.push_back(&p.value);
    }
    header["params"] = params;
    nlohmann::json quant = nlohmann::json::array();
    for (const auto& q : m.quant) {
        quant.push_back({{"layer", q.layer},
                         {"quantized", q.quantized},
                         {"frozen", q.frozen},
                         {"act_scale", q.act_scale},
                         {"weight_scales", q.weight_scales},
                         {"observer_max", q.observer.running_max},
                         {"observer_seeded", q.observer.seeded}});
    }
    header["quant"] = quant;

    std::ofstream os(path, std::ios::binary);
    if (!os) throw CheckpointError("checkpoint: cannot open '" + path + "' for writing");
    write_checkpoint_blob(os, header, tensors);
}

inline UnetModel load_model(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("checkpoint: cannot open '" + path + "' for reading");
    nlohmann::json header = read_checkpoint_header(is);
    try {
        if (header.at("version").get<int>() != 1 || header.at("kind").get<std::string>() != "unet") {
            throw CheckpointError("checkpoint: unsupported version or kind");
        }
        UnetConfig cfg = config_from_json(header.at("config"));
        UnetModel m = UnetModel::init(cfg, 0, role_from_name(header.at("role").get<std::string>()));

        const auto& params = header.at("params");
        if (params.size() != m.params.size()) {
            throw CheckpointError("checkpoint: expected " + std::to_string(m.params.size()) +
                                  " parameters, file has " + std::to_string(params.size()));
        }
        for (size_t i = 0; i < m.params.size(); ++i) {
            const auto& pj = params.at(i);
            const std::string name = pj.at("name").get<std::string>();
            const std::vector<int> shape = pj.at("shape").get<std::vector<int>>();
            const int idx = m.param_index(name);
            if (m.params[static_cast<size_t>(idx)].value.shape != shape) {
                throw CheckpointError("checkpoint: parameter '" + name + "' has shape " +
                                      Tensor::shape_str(shape) + ", model wants " +
                                      Tensor::shape_str(m.params[static_cast<size_t>(idx)].value.shape));
            }
            // data is stored in file order
            m.params[static_cast<size_t>(idx)].value = read_tensor_data(is, shape);
        }

        const auto& quant = header.at("quant");
        if (quant.size() != m.quant.size()) {
            throw CheckpointError("checkpoint: quantization table size mismatch");
        }
        for (const auto& qj : quant) {
            const std::string layer = qj.at("layer").get<std::string>();
            LayerQuant* slot = nullptr;
            for (auto& q : m.quant)
                if (q.layer == layer) slot = &q;
            if (!slot) throw CheckpointError("checkpoint: unknown quantized layer '" + layer + "'");
            slot->quantized = qj.at("quantized").get<bool>();
            slot->frozen = qj.at("frozen").get<bool>();
            slot->act_scale = qj.at("act_scale").get<float>();
            slot->weight_scales = qj.at("weight_scales").get<std::vector<float>>();
            slot->observer.running_max = qj.at("observer_max").get<float>();
            slot->observer.seeded = qj.at("observer_seeded").get<bool>();
        }
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("checkpoint: corrupt header: ") + e.what());
    }
}

}  // namespace qdiff
