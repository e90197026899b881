#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace seqlab {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (int e : s) {
        if (e <= 0) throw std::invalid_argument("tensor extent must be positive");
        n *= static_cast<std::size_t>(e);
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

namespace detail {
struct TensorData {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
};
}  // namespace detail

// Dense row-major 64-bit float tensor with an optional gradient buffer.
// Value-semantic handle: copies share the underlying buffer.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, bool requires_grad = false)
        : d_(std::make_shared<detail::TensorData>()) {
        d_->data.assign(shape_numel(shape), 0.0);
        d_->shape = std::move(shape);
        d_->requires_grad = requires_grad;
    }

    static Tensor scalar(double v) {
        Tensor t(Shape{1});
        t.data()[0] = v;
        return t;
    }

    static Tensor full(Shape shape, double v) {
        Tensor t(std::move(shape));
        std::fill(t.d_->data.begin(), t.d_->data.end(), v);
        return t;
    }

    static Tensor from(Shape shape, std::vector<double> values) {
        if (shape_numel(shape) != values.size())
            throw std::invalid_argument("value count does not match shape " + shape_str(shape));
        Tensor t;
        t.d_ = std::make_shared<detail::TensorData>();
        t.d_->shape = std::move(shape);
        t.d_->data = std::move(values);
        return t;
    }

    bool defined() const { return d_ != nullptr; }
    const Shape& shape() const { return d_->shape; }
    int rank() const { return static_cast<int>(d_->shape.size()); }
    int dim(int i) const { return d_->shape.at(static_cast<std::size_t>(i)); }
    std::size_t numel() const { return d_->data.size(); }

    double* data() { return d_->data.data(); }
    const double* data() const { return d_->data.data(); }
    std::vector<double>& values() { return d_->data; }
    const std::vector<double>& values() const { return d_->data; }

    bool requires_grad() const { return d_->requires_grad; }
    Tensor& set_requires_grad(bool on = true) {
        d_->requires_grad = on;
        return *this;
    }

    bool has_grad() const { return !d_->grad.empty(); }
    // Allocates (zero-filled) on first use.
    double* grad() {
        if (d_->grad.empty()) d_->grad.assign(d_->data.size(), 0.0);
        return d_->grad.data();
    }
    const std::vector<double>& grad_values() const { return d_->grad; }
    void zero_grad() { std::fill(d_->grad.begin(), d_->grad.end(), 0.0); }
    void drop_grad() { d_->grad.clear(); }

    double item() const {
        if (numel() != 1) throw std::invalid_argument("item() requires a scalar tensor");
        return d_->data[0];
    }

    bool same_storage(const Tensor& other) const { return d_ == other.d_; }

private:
    std::shared_ptr<detail::TensorData> d_;
};

// Define-by-run graph: a flat record of primitive operations in execution
// order (which is a topological order by construction). backward() walks it
// exactly once in reverse and then clears it.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void record(std::function<void()> backward_fn) { nodes_.push_back(std::move(backward_fn)); }
    std::size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    void run_backward() {
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
        nodes_.clear();
    }

    static Tape* active() { return active_tape(); }

    // RAII activation; nesting restores the previous tape. One tape per
    // worker thread, matching the single-writer-per-run concurrency model.
    class Scope {
    public:
        explicit Scope(Tape& t) : prev_(active_tape()) { active_tape() = &t; }
        ~Scope() { active_tape() = prev_; }
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        Tape* prev_;
    };

private:
    static Tape*& active_tape() {
        thread_local Tape* t = nullptr;
        return t;
    }
    std::vector<std::function<void()>> nodes_;
};

inline bool grad_enabled_for(const Tensor& a) { return Tape::active() && a.requires_grad(); }

// Seeds d(loss)/d(loss) = 1 and folds the tape back onto every recorded
// input. The tape is consumed.
inline void backward(Tensor loss, Tape& tape) {
    if (loss.numel() != 1) throw std::invalid_argument("backward requires a scalar loss");
    loss.grad()[0] += 1.0;
    tape.run_backward();
}

}  // namespace seqlab
