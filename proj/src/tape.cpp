#include "refsplat/tape.hpp"

#include "refsplat/types.hpp"

#include <fmt/format.h>

namespace refsplat {

namespace {

void require(bool ok, const char* what, const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    if (!ok) {
        throw InvalidInput(fmt::format("tape {}: shapes {}x{} and {}x{} do not fit", what, a.rows(), a.cols(), b.rows(),
                                       b.cols()));
    }
}

}  // namespace

Tape::Id Tape::variable(Matrix value) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = true;
    nodes_.push_back(std::move(n));
    return static_cast<Id>(nodes_.size()) - 1;
}

Tape::Id Tape::constant(Matrix value) {
    Node n;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return static_cast<Id>(nodes_.size()) - 1;
}

Tape::Matrix Tape::evaluate(const Node& n) const {
    if (n.op == Op::Leaf) return n.value;
    const Matrix& a = nodes_[n.a].value;
    switch (n.op) {
        case Op::Leaf:
            break;
        case Op::MatMul: {
            const Matrix& b = nodes_[n.b].value;
            require(a.cols() == b.rows(), "matmul", a, b);
            return a * b;
        }
        case Op::MatMulTN: {
            const Matrix& b = nodes_[n.b].value;
            require(a.rows() == b.rows(), "matmul_tn", a, b);
            return a.transpose() * b;
        }
        case Op::MatMulNT: {
            const Matrix& b = nodes_[n.b].value;
            require(a.cols() == b.cols(), "matmul_nt", a, b);
            return a * b.transpose();
        }
        case Op::Add: {
            const Matrix& b = nodes_[n.b].value;
            require(a.rows() == b.rows() && a.cols() == b.cols(), "add", a, b);
            return a + b;
        }
        case Op::Scale:
            return n.c * a;
        case Op::ScalarMul: {
            const Matrix& s = nodes_[n.b].value;
            require(s.size() == 1, "scalar_mul", a, s);
            return s(0, 0) * a;
        }
        case Op::AddColumns: {
            const Matrix& b = nodes_[n.b].value;
            require(b.cols() == 1 && b.rows() == a.rows(), "add_columns", a, b);
            return a.colwise() + b.col(0);
        }
        case Op::RowSum:
            return a.rowwise().sum();
        case Op::BroadcastColumns:
            return a.col(0).replicate(1, static_cast<Eigen::Index>(n.c));
        case Op::LeakyRelu:
            return a.unaryExpr([](double x) { return x > 0.0 ? x : kLeakySlope * x; });
        case Op::SlopeMul: {
            const Matrix& ref = nodes_[n.b].value;
            require(a.rows() == ref.rows() && a.cols() == ref.cols(), "slope_mul", a, ref);
            return a.binaryExpr(ref, [](double x, double r) { return r > 0.0 ? x : kLeakySlope * x; });
        }
        case Op::Dot: {
            const Matrix& b = nodes_[n.b].value;
            require(a.rows() == b.rows() && a.cols() == b.cols(), "dot", a, b);
            return Matrix::Constant(1, 1, a.cwiseProduct(b).sum());
        }
    }
    return {};
}

Tape::Id Tape::push(Op op, Id a, Id b, double c) {
    Node n;
    n.op = op;
    n.a = a;
    n.b = b;
    n.c = c;
    n.requires_grad = nodes_.at(a).requires_grad || (b >= 0 && op != Op::SlopeMul && nodes_.at(b).requires_grad);
    n.value = evaluate(n);
    nodes_.push_back(std::move(n));
    return static_cast<Id>(nodes_.size()) - 1;
}

Tape::Id Tape::matmul(Id a, Id b) { return push(Op::MatMul, a, b, 0.0); }
Tape::Id Tape::matmul_tn(Id a, Id b) { return push(Op::MatMulTN, a, b, 0.0); }
Tape::Id Tape::matmul_nt(Id a, Id b) { return push(Op::MatMulNT, a, b, 0.0); }
Tape::Id Tape::add(Id a, Id b) { return push(Op::Add, a, b, 0.0); }
Tape::Id Tape::scale(Id a, double c) { return push(Op::Scale, a, -1, c); }
Tape::Id Tape::scalar_mul(Id a, Id s) { return push(Op::ScalarMul, a, s, 0.0); }
Tape::Id Tape::add_columns(Id a, Id b) { return push(Op::AddColumns, a, b, 0.0); }
Tape::Id Tape::row_sum(Id a) { return push(Op::RowSum, a, -1, 0.0); }
Tape::Id Tape::broadcast_columns(Id b, int cols) { return push(Op::BroadcastColumns, b, -1, cols); }
Tape::Id Tape::leaky_relu(Id a) { return push(Op::LeakyRelu, a, -1, 0.0); }
Tape::Id Tape::slope_mul(Id a, Id ref) { return push(Op::SlopeMul, a, ref, 0.0); }
Tape::Id Tape::dot(Id a, Id b) { return push(Op::Dot, a, b, 0.0); }

Tape::Id Tape::mean(Id a) {
    const Matrix& v = value(a);
    return dot(a, constant(Matrix::Constant(v.rows(), v.cols(), 1.0 / static_cast<double>(v.size()))));
}

void Tape::accumulate(std::vector<Id>& adjoint, Id target, Id contribution) {
    if (!nodes_[target].requires_grad) return;
    adjoint[target] = adjoint[target] < 0 ? contribution : add(adjoint[target], contribution);
}

std::vector<Tape::Id> Tape::grad(Id output, const std::vector<Id>& wrt) {
    if (value(output).size() != 1) {
        throw InvalidInput("tape gradients need a scalar output");
    }
    std::vector<Id> adjoint(nodes_.size(), -1);
    adjoint[output] = constant(Matrix::Ones(1, 1));
    for (Id i = output; i >= 0; --i) {
        const Id g = adjoint[i];
        if (g < 0 || !nodes_[i].requires_grad) continue;
        // Copy: pushing new nodes may reallocate nodes_.
        const Node n = Node{nodes_[i].op, nodes_[i].a, nodes_[i].b, nodes_[i].c, {}, true};
        switch (n.op) {
            case Op::Leaf:
                break;
            case Op::MatMul:
                accumulate(adjoint, n.a, matmul_nt(g, n.b));
                accumulate(adjoint, n.b, matmul_tn(n.a, g));
                break;
            case Op::MatMulTN:
                accumulate(adjoint, n.a, matmul_nt(n.b, g));
                accumulate(adjoint, n.b, matmul(n.a, g));
                break;
            case Op::MatMulNT:
                accumulate(adjoint, n.a, matmul(g, n.b));
                accumulate(adjoint, n.b, matmul_tn(g, n.a));
                break;
            case Op::Add:
                accumulate(adjoint, n.a, g);
                accumulate(adjoint, n.b, g);
                break;
            case Op::Scale:
                accumulate(adjoint, n.a, scale(g, n.c));
                break;
            case Op::ScalarMul:
                accumulate(adjoint, n.a, scalar_mul(g, n.b));
                accumulate(adjoint, n.b, dot(n.a, g));
                break;
            case Op::AddColumns:
                accumulate(adjoint, n.a, g);
                accumulate(adjoint, n.b, row_sum(g));
                break;
            case Op::RowSum:
                accumulate(adjoint, n.a, broadcast_columns(g, static_cast<int>(value(n.a).cols())));
                break;
            case Op::BroadcastColumns:
                accumulate(adjoint, n.a, row_sum(g));
                break;
            case Op::LeakyRelu:
                accumulate(adjoint, n.a, slope_mul(g, n.a));
                break;
            case Op::SlopeMul:
                accumulate(adjoint, n.a, slope_mul(g, n.b));
                break;
            case Op::Dot:
                accumulate(adjoint, n.a, scalar_mul(n.b, g));
                accumulate(adjoint, n.b, scalar_mul(n.a, g));
                break;
        }
    }
    std::vector<Id> out;
    out.reserve(wrt.size());
    for (Id w : wrt) {
        out.push_back(adjoint.at(w) >= 0 ? adjoint[w] : constant(Matrix::Zero(value(w).rows(), value(w).cols())));
    }
    return out;
}

void Tape::set_value(Id id, Matrix value) {
    Node& n = nodes_.at(id);
    if (n.op != Op::Leaf) {
        throw InvalidInput("only leaf values can be replaced");
    }
    if (value.rows() != n.value.rows() || value.cols() != n.value.cols()) {
        throw InvalidInput("replacement leaf value changes shape");
    }
    n.value = std::move(value);
}

void Tape::replay() {
    for (Node& n : nodes_) {
        if (n.op != Op::Leaf) n.value = evaluate(n);
    }
}

}  // namespace refsplat
