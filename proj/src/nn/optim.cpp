// SPDX-License-Identifier: Apache-2.0
#include "obidiff/nn/optim.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <type_traits>

#include "obidiff/common/errors.hpp"
#include "obidiff/simd/kernels.hpp"

namespace obidiff::nn {

template <typename T>
AdamW<T>::AdamW(ParamList<T> params, AdamWConfig config)
    : params_(std::move(params)), config_(config) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
        m_[i].assign(params_[i].var.size(), T(0));
        v_[i].assign(params_[i].var.size(), T(0));
    }
}

template <typename T>
void AdamW<T>::zero_grad() {
    for (auto& p : params_) p.var.zero_grad();
}

template <typename T>
void AdamW<T>::step() {
    ++step_;
    const double bc1 = 1.0 - std::pow(config_.beta1, double(step_));
    const double bc2 = 1.0 - std::pow(config_.beta2, double(step_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Var<T>& p = params_[i].var;
        if (!p.requires_grad() || p.grad().empty()) continue;
        const std::size_t n = p.size();
        T* w = p.mutable_data().data();
        const T* g = p.grad().data();
        if constexpr (std::is_same_v<T, float>) {
            simd::active().adamw_step(n, w, g, m_[i].data(), v_[i].data(), float(config_.lr),
                                      float(config_.beta1), float(config_.beta2),
                                      float(config_.eps), float(config_.weight_decay), float(bc1),
                                      float(bc2));
        } else {
            for (std::size_t j = 0; j < n; ++j) {
                m_[i][j] = T(config_.beta1) * m_[i][j] + T(1 - config_.beta1) * g[j];
                v_[i][j] = T(config_.beta2) * v_[i][j] + T(1 - config_.beta2) * g[j] * g[j];
                w[j] -= T(config_.lr * config_.weight_decay) * w[j];
                w[j] -= T(config_.lr) * (m_[i][j] / T(bc1)) /
                        (std::sqrt(v_[i][j] / T(bc2)) + T(config_.eps));
            }
        }
    }
}

template <typename T>
Ema<T>::Ema(const ParamList<T>& params, double decay) : decay_(decay) {
    for (const auto& p : params) shadow_.emplace_back(p.var.data().begin(), p.var.data().end());
}

template <typename T>
void Ema<T>::update(const ParamList<T>& params) {
    const T d = T(decay_);
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto live = params[i].var.data();
        for (std::size_t j = 0; j < live.size(); ++j)
            shadow_[i][j] = d * shadow_[i][j] + (T(1) - d) * live[j];
    }
}

template <typename T>
void Ema<T>::swap_into(ParamList<T>& params) {
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto live = params[i].var.mutable_data();
        for (std::size_t j = 0; j < live.size(); ++j) std::swap(live[j], shadow_[i][j]);
    }
}

template <typename T>
double clip_grad_norm(const ParamList<T>& params, double max_norm) {
    double sq = 0.0;
    for (const auto& p : params)
        for (T g : p.var.grad()) sq += double(g) * double(g);
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const T factor = T(max_norm / norm);
        for (const auto& p : params)
            for (T& g : p.var.raw()->grad) g *= factor;
    }
    return norm;
}

template double clip_grad_norm(const ParamList<float>&, double);
template double clip_grad_norm(const ParamList<double>&, double);
template class AdamW<float>;
template class AdamW<double>;
template class Ema<float>;
template class Ema<double>;

namespace {

constexpr char kParamMagic[4] = {'O', 'B', 'D', 'P'};
constexpr char kMomentMagic[4] = {'O', 'B', 'D', 'M'};
constexpr std::uint32_t kBlobVersion = 1;

template <typename V>
void put(std::ostream& os, V v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V get(std::istream& is) {
    V v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(V));
    if (!is) throw IoError("parameter blob truncated");
    return v;
}

void write_header(std::ostream& os, const char (&magic)[4], std::uint32_t count) {
    os.write(magic, 4);
    put<std::uint32_t>(os, kBlobVersion);
    put<std::uint32_t>(os, count);
}

std::uint32_t read_header(std::istream& is, const char (&magic)[4], const std::string& what) {
    char m[4];
    is.read(m, 4);
    if (!is || std::memcmp(m, magic, 4) != 0) throw IoError(what + ": bad magic");
    if (get<std::uint32_t>(is) != kBlobVersion) throw IoError(what + ": unsupported version");
    return get<std::uint32_t>(is);
}

void write_tensor(std::ostream& os, const std::string& name, const Shape& shape,
                  const float* data, std::size_t n) {
    put<std::uint32_t>(os, std::uint32_t(name.size()));
    os.write(name.data(), std::streamsize(name.size()));
    put<std::uint32_t>(os, std::uint32_t(shape.size()));
    for (auto d : shape) put<std::uint64_t>(os, d);
    os.write(reinterpret_cast<const char*>(data), std::streamsize(n * sizeof(float)));
}

struct BlobTensor {
    Shape shape;
    std::vector<float> data;
};

std::map<std::string, BlobTensor> read_tensors(std::istream& is, std::uint32_t count) {
    std::map<std::string, BlobTensor> out;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto len = get<std::uint32_t>(is);
        std::string name(len, '\0');
        is.read(name.data(), len);
        BlobTensor t;
        const auto rank = get<std::uint32_t>(is);
        for (std::uint32_t r = 0; r < rank; ++r) t.shape.push_back(std::size_t(get<std::uint64_t>(is)));
        t.data.resize(numel(t.shape));
        is.read(reinterpret_cast<char*>(t.data.data()), std::streamsize(t.data.size() * sizeof(float)));
        if (!is) throw IoError("parameter blob truncated at " + name);
        out.emplace(std::move(name), std::move(t));
    }
    return out;
}

std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + path.string());
    return os;
}

std::ifstream open_in(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot read " + path.string());
    return is;
}

}  // namespace

void save_params(const std::filesystem::path& path, const ParamList<float>& params) {
    auto os = open_out(path);
    write_header(os, kParamMagic, std::uint32_t(params.size()));
    for (const auto& p : params)
        write_tensor(os, p.name, p.var.shape(), p.var.data().data(), p.var.size());
    if (!os) throw IoError("write failed: " + path.string());
}

void load_params(const std::filesystem::path& path, ParamList<float>& params) {
    auto is = open_in(path);
    const auto tensors = read_tensors(is, read_header(is, kParamMagic, path.string()));
    for (auto& p : params) {
        auto it = tensors.find(p.name);
        if (it == tensors.end()) throw ModelStateError("checkpoint missing parameter " + p.name);
        if (it->second.shape != p.var.shape())
            throw ModelStateError("checkpoint shape mismatch for " + p.name + ": " +
                                  to_string(it->second.shape) + " vs " + to_string(p.var.shape()));
        std::copy(it->second.data.begin(), it->second.data.end(), p.var.mutable_data().begin());
    }
}

void save_moments(const std::filesystem::path& path, AdamW<float>& opt) {
    auto os = open_out(path);
    auto& m = opt.first_moments();
    auto& v = opt.second_moments();
    write_header(os, kMomentMagic, std::uint32_t(2 * m.size()));
    put<std::int64_t>(os, opt.steps());
    for (std::size_t i = 0; i < m.size(); ++i) {
        write_tensor(os, "m" + std::to_string(i), {m[i].size()}, m[i].data(), m[i].size());
        write_tensor(os, "v" + std::to_string(i), {v[i].size()}, v[i].data(), v[i].size());
    }
}

void load_moments(const std::filesystem::path& path, AdamW<float>& opt) {
    auto is = open_in(path);
    const auto count = read_header(is, kMomentMagic, path.string());
    const auto steps = get<std::int64_t>(is);
    const auto tensors = read_tensors(is, count);
    auto& m = opt.first_moments();
    auto& v = opt.second_moments();
    for (std::size_t i = 0; i < m.size(); ++i) {
        const auto mi = tensors.find("m" + std::to_string(i));
        const auto vi = tensors.find("v" + std::to_string(i));
        if (mi == tensors.end() || vi == tensors.end() || mi->second.data.size() != m[i].size())
            throw ModelStateError("optimizer state does not match model");
        m[i] = mi->second.data;
        v[i] = vi->second.data;
    }
    opt.set_steps(steps);
}

}  // namespace obidiff::nn
